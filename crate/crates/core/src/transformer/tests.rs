use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check_params;

const ALL: [AttentionVariant; 4] = [
    AttentionVariant::Dense,
    AttentionVariant::Sparse { window: 2 },
    AttentionVariant::SharedHeads,
    AttentionVariant::SparseShared { window: 3 },
];

fn small(attention: AttentionVariant) -> TransformerConfig {
    TransformerConfig {
        num_blocks: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.1,
        attention,
        max_sequence_len: 16,
    }
}

fn tokens(t: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[t, d], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn run(params: &ParamSet, cfg: &TransformerConfig, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let xv = g.constant(x.clone());
    let y = forward(&mut g, &mut b, cfg, "t.", xv, &[Segment::new(0, x.rows())], None).unwrap();
    g.value(y).clone()
}

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = small(AttentionVariant::Dense);
    let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(1));
    let x = tokens(1, 8, 2);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params);
    let xv = g.constant(x.clone());
    let y = causal_attention(&mut g, &mut b, &cfg, "t.", 0, xv, &[Segment::new(0, 1)]).unwrap();
    // oracle: (x Wv + bv) Wo + bo
    let get = |n: &str| params.get(&format!("t.block0.attn.{n}")).unwrap();
    let mut expected = vec![0.0; 8];
    let mut v = get("bv").data().to_vec();
    for (c, vc) in v.iter_mut().enumerate() {
        for r in 0..8 {
            *vc += x.data()[r] * get("wv").at(r, c);
        }
    }
    for (c, e) in expected.iter_mut().enumerate() {
        *e = get("bo").data()[c] + (0..8).map(|r| v[r] * get("wo").at(r, c)).sum::<f64>();
    }
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn sparse_with_full_window_matches_dense() {
    let t = 10;
    for (sparse, dense) in [
        (AttentionVariant::Sparse { window: 10 }, AttentionVariant::Dense),
        (AttentionVariant::SparseShared { window: 12 }, AttentionVariant::SharedHeads),
    ] {
        let cfg_d = small(dense);
        let cfg_s = small(sparse);
        let params = init_params(&cfg_d, "t.", &mut ChaCha8Rng::seed_from_u64(3));
        let x = tokens(t, 8, 4);
        let yd = run(&params, &cfg_d, &x);
        let ys = run(&params, &cfg_s, &x);
        assert!(yd.max_abs_diff(&ys) <= 1e-10);
    }
}

#[test]
fn window_two_row_support() {
    let cfg = small(AttentionVariant::Sparse { window: 2 });
    let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(5));
    let mats = attention_weights(&params, &cfg, "t.", 1, &tokens(6, 8, 6)).unwrap();
    for m in &mats {
        for t in 0..6 {
            let row = m.row(t);
            let nonzero = row.iter().filter(|&&p| p != 0.0).count();
            assert_eq!(nonzero, (t + 1).min(2), "row {t}: {row:?}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[t + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn attention_rows_are_distributions_for_all_variants() {
    for v in ALL {
        let cfg = small(v);
        let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(7));
        for m in attention_weights(&params, &cfg, "t.", 0, &tokens(9, 8, 8)).unwrap() {
            for t in 0..9 {
                let row = m.row(t);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_output_projections_pass_through() {
    let cfg = small(AttentionVariant::Dense);
    let mut params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(9));
    for i in 0..cfg.num_blocks {
        for n in ["attn.wo", "attn.bo", "ffn.w2", "ffn.b2"] {
            let name = format!("t.block{i}.{n}");
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.insert(name, Tensor::zeros(&shape));
        }
    }
    let x = tokens(5, 8, 10);
    assert_eq!(run(&params, &cfg, &x), x);
}

#[test]
fn causality_is_exact_for_every_variant() {
    for v in ALL {
        let cfg = small(v);
        let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(11));
        let x = tokens(8, 8, 12);
        let base = run(&params, &cfg, &x);
        for pos in [5, 7] {
            let mut xp = x.clone();
            for c in 0..8 {
                xp.data_mut()[pos * 8 + c] += 0.75;
            }
            let out = run(&params, &cfg, &xp);
            for r in 0..pos {
                let same = base.row(r).iter().zip(out.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{v:?}: row {r} changed after perturbing {pos}");
            }
            assert_ne!(base.row(pos), out.row(pos));
        }
    }
}

#[test]
fn segments_do_not_leak() {
    let cfg = small(AttentionVariant::Dense);
    let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(13));
    let a = tokens(4, 8, 14);
    let b = tokens(3, 8, 15);
    let mut stacked = a.data().to_vec();
    stacked.extend_from_slice(b.data());
    let stacked = Tensor::matrix(7, 8, stacked).unwrap();
    let mut g = Graph::new();
    let mut bind = Binder::frozen(&params);
    let xv = g.constant(stacked);
    let y = forward(&mut g, &mut bind, &cfg, "t.", xv, &[Segment::new(0, 4), Segment::new(4, 3)], None).unwrap();
    let ya = run(&params, &cfg, &a);
    let yb = run(&params, &cfg, &b);
    assert!(g.value(y).data()[..32].iter().zip(ya.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!(g.value(y).data()[32..].iter().zip(yb.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn gradient_check_every_variant() {
    for v in ALL {
        let mut cfg = small(v);
        cfg.dropout_rate = 0.0;
        let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(16));
        let x = tokens(4, 8, 17);
        let w = tokens(4, 8, 18);
        let err = grad_check_params(
            |g, b| {
                let xv = g.constant(x.clone());
                let y = forward(g, b, &cfg, "t.", xv, &[Segment::new(0, 4)], None)
                    .map_err(|e| match e {
                        TransformerError::Numerics(n) => n,
                        other => panic!("{other}"),
                    })?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &params,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err <= 1e-4, "{v:?}: {err}");
    }
}

#[test]
fn dropout_only_in_training() {
    let cfg = small(AttentionVariant::Dense);
    let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(19));
    let x = tokens(5, 8, 20);
    let eval = run(&params, &cfg, &x);
    assert_eq!(eval, run(&params, &cfg, &x));
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params);
    let xv = g.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = forward(&mut g, &mut b, &cfg, "t.", xv, &[Segment::new(0, 5)], Some(&mut rng)).unwrap();
    assert_ne!(g.value(y), &eval);
}

#[test]
fn parameter_counts() {
    for v in ALL {
        let cfg = small(v);
        let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(22));
        assert_eq!(params.scalar_count(), count_parameters(&cfg), "{v:?}");
    }
    // one head: sharing changes nothing
    let mut dense = small(AttentionVariant::Dense);
    dense.num_heads = 1;
    let mut shared = dense.clone();
    shared.attention = AttentionVariant::SharedHeads;
    assert_eq!(count_parameters(&shared), count_parameters(&dense));

    // d = 8, two heads: Q/K/V are 8 x 4 (+4) once, not 8 x 8 (+8)
    let dense = small(AttentionVariant::Dense);
    let shared = small(AttentionVariant::SharedHeads);
    let ffn = 8 * 16 + 16 + 16 * 8 + 8;
    let out = 8 * 8 + 8;
    let norms = 4 * 8;
    assert_eq!(block_parameters(&dense), 3 * (8 * 8 + 8) + out + norms + ffn);
    assert_eq!(block_parameters(&shared), 3 * (8 * 4 + 4) + 4 + out + norms + ffn);
    assert!(count_parameters(&shared) < count_parameters(&dense));

    let mut doubled = dense.clone();
    doubled.num_blocks *= 2;
    assert_eq!(count_parameters(&doubled), 2 * count_parameters(&dense));
}

#[test]
fn shared_never_exceeds_dense_with_multiple_heads() {
    for heads in [2, 4, 8] {
        let dense = TransformerConfig {
            num_heads: heads,
            ..TransformerConfig::default()
        };
        let shared = dense.clone().with_attention(AttentionVariant::SharedHeads);
        assert!(count_parameters(&shared) < count_parameters(&dense));
    }
}

#[test]
fn attention_cost_scaling() {
    let d = 16;
    for t in [64, 128, 256] {
        let dense = attention_cost(2 * t, d, 4, AttentionVariant::Dense) as f64
            / attention_cost(t, d, 4, AttentionVariant::Dense) as f64;
        assert!((dense - 4.0).abs() <= 0.4, "dense ratio {dense}");
        let sparse = attention_cost(2 * t, d, 4, AttentionVariant::Sparse { window: 8 }) as f64
            / attention_cost(t, d, 4, AttentionVariant::Sparse { window: 8 }) as f64;
        assert!((sparse - 2.0).abs() <= 0.2, "sparse ratio {sparse}");
    }
    assert_eq!(
        attention_cost(8, d, 4, AttentionVariant::Dense),
        attention_cost(8, d, 4, AttentionVariant::Sparse { window: 8 })
    );
    // dense count is T(T+1)d: every query scores and sums over its history
    assert_eq!(attention_cost(10, d, 4, AttentionVariant::Dense), 10 * 11 * d as u64);
}

#[test]
fn config_validation() {
    let mut cfg = small(AttentionVariant::Sparse { window: 0 });
    assert!(matches!(cfg.validate(), Err(TransformerError::Window { .. })));
    cfg.attention = AttentionVariant::Dense;
    cfg.num_heads = 3;
    assert!(matches!(cfg.validate(), Err(TransformerError::HeadSplit { .. })));
}

#[test]
fn sequence_overflow_is_rejected() {
    let cfg = small(AttentionVariant::Dense);
    let params = init_params(&cfg, "t.", &mut ChaCha8Rng::seed_from_u64(23));
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params);
    let x = g.constant(tokens(17, 8, 24));
    let err = forward(&mut g, &mut b, &cfg, "t.", x, &[Segment::new(0, 17)], None).unwrap_err();
    assert!(matches!(err, TransformerError::SequenceTooLong { len: 17, max: 16 }));
}
