//! Raw slice kernels shared by the tape operations.

/// `c (m x n) (+)= op(a) * op(b)`.
///
/// `a` is stored row-major as `m x k`, or as `k x m` when `a_t` is set;
/// likewise `b` is `k x n`, or `n x k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Contiguous token range attended within, `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

/// First visible position for query `t` under an optional sliding window.
#[inline]
pub(crate) fn window_start(t: usize, window: Option<usize>) -> usize {
    match window {
        Some(w) => (t + 1).saturating_sub(w),
        None => 0,
    }
}

/// Causal multi-head attention over stacked segments.
///
/// Returns the output, the softmax weights (flattened in segment, head,
/// query, key order over visible keys only) and the number of scalar
/// multiplications spent on scores and weighted sums.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dim: usize,
    heads: usize,
    segments: &[Segment],
    window: Option<usize>,
) -> (Vec<f64>, Vec<f64>, u64) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::new();
    let mut muls = 0u64;
    let mut scores = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seg.len {
                let qi = (seg.start + t) * dim + off;
                let qrow = &q[qi..qi + dh];
                let j0 = window_start(t, window);
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in j0..=t {
                    let ki = (seg.start + j) * dim + off;
                    let s = dot(qrow, &k[ki..ki + dh]) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                muls += ((t + 1 - j0) * dh) as u64;
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let orow = &mut out[qi..qi + dh];
                for (idx, j) in (j0..=t).enumerate() {
                    let p = scores[idx] / total;
                    probs.push(p);
                    let vi = (seg.start + j) * dim + off;
                    for (o, &vv) in orow.iter_mut().zip(&v[vi..vi + dh]) {
                        *o += p * vv;
                    }
                }
                muls += ((t + 1 - j0) * dh) as u64;
            }
        }
    }
    (out, probs, muls)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    dim: usize,
    heads: usize,
    segments: &[Segment],
    window: Option<usize>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seg.len {
                let qi = (seg.start + t) * dim + off;
                let j0 = window_start(t, window);
                let n = t + 1 - j0;
                let p = &probs[cursor..cursor + n];
                cursor += n;
                let go = &grad_out[qi..qi + dh];
                dp.clear();
                let mut weighted = 0.0;
                for (idx, j) in (j0..=t).enumerate() {
                    let vi = (seg.start + j) * dim + off;
                    let d = dot(go, &v[vi..vi + dh]);
                    weighted += d * p[idx];
                    dp.push(d);
                    for (dvv, &g) in dv[vi..vi + dh].iter_mut().zip(go) {
                        *dvv += p[idx] * g;
                    }
                }
                for (idx, j) in (j0..=t).enumerate() {
                    let ds = p[idx] * (dp[idx] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ki = (seg.start + j) * dim + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * k[ki + c];
                        dk[ki + c] += ds * q[qi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of one slice, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log(sum(exp(x)))` with max subtraction.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
