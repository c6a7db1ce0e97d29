use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(m(1, 2, &[1.0, 2.0]));
    let c = g.constant(m(2, 1, &[3.0, 4.0]));
    let y = g.matmul(a, c).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[5, 7], 1);
    let b = rand_t(&[7, 3], 2);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    let oracle = naive_matmul(&a, &b);
    assert!(g.value(y).max_abs_diff(&oracle) <= 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(m(3, 3, &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let y = g.softmax(x).unwrap();
    let v = g.value(y);
    for j in 0..3 {
        assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v.at(1, 0) - 1.0).abs() < 1e-12);
    assert!(v.at(1, 1) < 1e-300);
    let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (j, e) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((v.at(2, j) - e.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(m(1, 3, &[5.0, 5.0, 5.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let ones = g.constant(Tensor::full(&[2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(m(1, 2, &[1.0, 3.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);

    let ones = g.constant(Tensor::full(&[8], 1.0));
    let zeros = g.constant(Tensor::zeros(&[8]));
    let x = g.constant(rand_t(&[4, 8], 3));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gain_shape_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let gain = g.constant(Tensor::zeros(&[3]));
    let bias = g.constant(Tensor::zeros(&[4]));
    assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
}

#[test]
fn backward_simple_examples() {
    let mut g = Graph::new();
    let x = g.param(rand_t(&[2, 3], 4));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn fan_out_accumulates() {
    // y = sum(x) + sum(x) + sum(x*x): dy/dx = 2 + 2x
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.5]));
    let a = g.sum(x).unwrap();
    let b = g.sum(x).unwrap();
    let xx = g.mul(x, x).unwrap();
    let c = g.sum(xx).unwrap();
    let ab = g.add(a, b).unwrap();
    let y = g.add(ab, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, -1.0]);
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1000.0]));
    assert_eq!(g.exp(x), Err(NumericsError::NonFinite { op: "exp" }));
}

#[test]
fn adamw_zero_grad_no_decay_is_identity() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![0.3, -0.7]));
    let before = params.clone();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
    opt.step(&mut params, &grads).unwrap();
    assert_eq!(params, before);
}

#[test]
fn adamw_first_step_moves_by_lr_times_sign() {
    let lr = 1e-3;
    let eps = 1e-8;
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![1.0, 1.0, 1.0]));
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        eps,
        weight_decay: 0.0,
        ..Default::default()
    });
    let g = [0.5, -2.0, 1e-3];
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(g.to_vec()))]);
    opt.step(&mut params, &grads).unwrap();
    // bias-corrected m = g, v = g^2 after one step
    for (w, gi) in params.get("w").unwrap().data().iter().zip(g) {
        let expected = 1.0 - lr * gi / (gi.abs() + eps);
        assert!((w - expected).abs() < 1e-15);
        assert!(((1.0 - w) - lr * gi.signum()).abs() < 1e-7);
    }
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_decoupled_decay() {
    let (lr, wd) = (1e-2, 0.1);
    let mut params = ParamSet::new();
    params.insert("w", Tensor::vector(vec![2.0]));
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: wd,
        ..Default::default()
    });
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0]))]);
    opt.step(&mut params, &grads).unwrap();
    assert!((params.get("w").unwrap().data()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);

    params.insert("w", Tensor::vector(vec![2.0]));
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: wd,
        ..Default::default()
    });
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.4]))]);
    opt.step(&mut params, &grads).unwrap();
    let expected = 2.0 * (1.0 - lr * wd) - lr * 0.4 / (0.4 + 1e-8);
    assert!((params.get("w").unwrap().data()[0] - expected).abs() < 1e-14);
}

#[test]
fn adamw_shape_mismatch() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(&[2]));
    let mut opt = AdamW::new(AdamWConfig::default());
    let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
    assert!(opt.step(&mut params, &grads).is_err());
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn grad_check_quadratic_is_exact() {
    let a = rand_t(&[4, 4], 5);
    let err = grad_check(
        |g, x| {
            let av = g.constant(a.clone());
            let ax = g.matmul(x, av)?;
            let q = g.mul(ax, x)?;
            g.sum(q)
        },
        &rand_t(&[3, 4], 6),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "quadratic grad-check error {err}");
}

fn check(name: &str, err: f64) {
    assert!(err <= 1e-4, "{name}: relative error {err}");
}

/// Reduces any tensor to a scalar through a fixed random projection so
/// every output coordinate carries a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let w = g.constant(Tensor::uniform(g.value(y).shape(), -1.0, 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn grad_check_elementwise_ops() {
    let x0 = rand_t(&[3, 5], 10);
    let other = rand_t(&[3, 5], 11);
    let bias = rand_t(&[5], 12);
    type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var, NumericsError>>;
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let cases: Vec<(&str, OpFn)> = vec![
        ("add", Box::new(move |g, x| { let o = g.constant(other.clone()); g.add(x, o) })),
        ("sub", Box::new(move |g, x| { let o = g.constant(o2.clone()); g.sub(o, x) })),
        ("mul", Box::new(move |g, x| { let o = g.constant(o3.clone()); g.mul(x, o) })),
        ("add_row", Box::new(move |g, x| { let b = g.constant(bias.clone()); g.add_row(x, b) })),
        ("scale", Box::new(|g, x| g.scale(x, -1.7))),
        ("gelu", Box::new(|g, x| g.gelu(x))),
        ("tanh", Box::new(|g, x| g.tanh(x))),
        ("exp", Box::new(|g, x| g.exp(x))),
        ("softmax", Box::new(|g, x| g.softmax(x))),
        ("log_softmax", Box::new(|g, x| g.log_softmax(x))),
        ("slice_cols", Box::new(|g, x| g.slice_cols(x, 1, 3))),
        ("concat_cols", Box::new(|g, x| { let s = g.slice_cols(x, 0, 2)?; g.concat_cols(&[x, s, x]) })),
        ("concat_rows", Box::new(|g, x| g.concat_rows(&[x, x]))),
        ("gather_rows", Box::new(|g, x| g.gather_rows(x, &[2, 0, 2, 1]))),
        ("tile_cols", Box::new(|g, x| g.tile_cols(x, 3))),
        ("pick", Box::new(|g, x| g.pick(x, &[4, 0, 2]))),
        ("dropout", Box::new(|g, x| g.dropout(x, 0.3, &mut rng(99)))),
        ("mean", Box::new(move |g, x| { let o = g.constant(o4.clone()); let p = g.mul(x, o)?; g.mean(p) })),
    ];
    for (i, (name, f)) in cases.into_iter().enumerate() {
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                project(g, y, 100 + i as u64)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        check(name, err);
    }
}

#[test]
fn grad_check_matmul_both_sides() {
    let b = rand_t(&[5, 4], 20);
    let a = rand_t(&[3, 5], 21);
    let err = grad_check(|g, x| { let bv = g.constant(b.clone()); let y = g.matmul(x, bv)?; project(g, y, 1) }, &a, 1e-5).unwrap();
    check("matmul lhs", err);
    let err = grad_check(|g, x| { let av = g.constant(a.clone()); let y = g.matmul(av, x)?; project(g, y, 2) }, &b, 1e-5).unwrap();
    check("matmul rhs", err);
}

#[test]
fn grad_check_layer_norm_all_inputs() {
    let x = rand_t(&[4, 6], 30);
    let gain = rand_t(&[6], 31);
    let bias = rand_t(&[6], 32);
    let (g1, b1) = (gain.clone(), bias.clone());
    let err = grad_check(|g, xv| { let gv = g.constant(g1.clone()); let bv = g.constant(b1.clone()); let y = g.layer_norm(xv, gv, bv, 1e-5)?; project(g, y, 3) }, &x, 1e-5).unwrap();
    check("layer_norm x", err);
    let (x1, b2) = (x.clone(), bias.clone());
    let err = grad_check(|g, gv| { let xv = g.constant(x1.clone()); let bv = g.constant(b2.clone()); let y = g.layer_norm(xv, gv, bv, 1e-5)?; project(g, y, 3) }, &gain, 1e-5).unwrap();
    check("layer_norm gain", err);
    let err = grad_check(|g, bv| { let xv = g.constant(x.clone()); let gv = g.constant(gain.clone()); let y = g.layer_norm(xv, gv, bv, 1e-5)?; project(g, y, 3) }, &bias, 1e-5).unwrap();
    check("layer_norm bias", err);
}

#[test]
fn grad_check_distance_and_losses() {
    let y = rand_t(&[5, 3], 40);
    let book = rand_t(&[4, 3], 41);
    let b1 = book.clone();
    let err = grad_check(|g, x| { let e = g.constant(b1.clone()); let d = g.neg_sq_dist(x, e)?; project(g, d, 4) }, &y, 1e-5).unwrap();
    check("neg_sq_dist y", err);
    let y1 = y.clone();
    let err = grad_check(|g, e| { let x = g.constant(y1.clone()); let d = g.neg_sq_dist(x, e)?; project(g, d, 4) }, &book, 1e-5).unwrap();
    check("neg_sq_dist codebook", err);

    let targets = [0, 3, 1, 1, 2];
    let weights = [1.0, 0.5, 1.0, 0.25, 1.0];
    let err = grad_check(|g, x| g.cross_entropy(x, &targets, &weights), &rand_t(&[5, 4], 42), 1e-5).unwrap();
    check("cross_entropy", err);

    let target = rand_t(&[5, 3], 43);
    let err = grad_check(|g, x| g.weighted_sq_err(x, &target, &weights), &y, 1e-5).unwrap();
    check("weighted_sq_err", err);
}

#[test]
fn grad_check_clipped_surrogate_away_from_kinks() {
    // ratios chosen inside, below and above the clip band, none at a kink
    let ratio = Tensor::vector(vec![1.05, 0.6, 1.5, 0.95, 1.3, 0.7]);
    let adv = [1.0, 1.0, 1.0, -1.0, -0.5, -2.0];
    let err = grad_check(|g, r| { let s = g.clipped_surrogate(r, &adv, 0.2)?; g.sum(s) }, &ratio, 1e-6).unwrap();
    check("clipped_surrogate", err);
}

fn attention_check(heads: usize, window: Option<usize>) {
    let dim = 8;
    let segs = [Segment::new(0, 5), Segment::new(5, 4)];
    let q = rand_t(&[9, dim], 50);
    let k = rand_t(&[9, dim], 51);
    let v = rand_t(&[9, dim], 52);
    let (k1, v1) = (k.clone(), v.clone());
    let err = grad_check(|g, x| { let kk = g.constant(k1.clone()); let vv = g.constant(v1.clone()); let y = g.attention(x, kk, vv, heads, &segs, window)?; project(g, y, 5) }, &q, 1e-5).unwrap();
    check("attention q", err);
    let (q1, v2) = (q.clone(), v.clone());
    let err = grad_check(|g, x| { let qq = g.constant(q1.clone()); let vv = g.constant(v2.clone()); let y = g.attention(qq, x, vv, heads, &segs, window)?; project(g, y, 5) }, &k, 1e-5).unwrap();
    check("attention k", err);
    let err = grad_check(|g, x| { let qq = g.constant(q.clone()); let kk = g.constant(k.clone()); let y = g.attention(qq, kk, x, heads, &segs, window)?; project(g, y, 5) }, &v, 1e-5).unwrap();
    check("attention v", err);
}

#[test]
fn grad_check_attention_dense_and_windowed() {
    attention_check(2, None);
    attention_check(4, Some(2));
    attention_check(1, Some(3));
}

#[test]
fn deterministic_bytes() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(rand_t(&[6, 8], 60));
        let w = g.constant(rand_t(&[8, 8], 61));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let y = g.attention(h, h, h, 2, &[Segment::new(0, 6)], None).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_params_over_named_tensors() {
    let mut params = ParamSet::new();
    params.insert("a", rand_t(&[3, 4], 70));
    params.insert("b", rand_t(&[4], 71));
    let x = rand_t(&[2, 3], 72);
    let err = grad_check_params(
        |g, b| {
            let xv = g.constant(x.clone());
            let a = b.var(g, "a")?;
            let bias = b.var(g, "b")?;
            let h = g.matmul(xv, a)?;
            let h = g.add_row(h, bias)?;
            let h = g.tanh(h)?;
            project(g, h, 7)
        },
        &params,
        1e-5,
        None,
    )
    .unwrap();
    check("param check", err);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_agrees_with_naive(seed in 0u64..1000, m in 1usize..9, k in 1usize..9, n in 1usize..9) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[k, n], seed + 1);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, o) in g.value(y).data().iter().zip(oracle.data()) {
            prop_assert!((x - o).abs() <= 1e-10 * o.abs().max(1.0));
        }
    }
}
