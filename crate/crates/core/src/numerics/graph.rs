//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value and
//! the indices of its inputs. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid reverse topological order and
//! [`Graph::backward`] visits each node once.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, Segment};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    TileCols {
        x: Var,
        reps: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    NegSqDist {
        y: Var,
        codebook: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    WeightedSqErr {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        window: Option<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ClippedSurrogate {
        ratio: Var,
        adv: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    attention_muls: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiplications spent inside attention score/weighted-sum kernels.
    pub fn attention_muls(&self) -> u64 {
        self.attention_muls
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product of `a (m x k)` and a 2-D `b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push("sub", Tensor::from_parts(shape, data), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = xv.shape().to_vec();
        self.push("add_row", Tensor::from_parts(shape, data), Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, data), Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, data), op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Per-row standardization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normed = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_into(src, dst);
        }
        let shape = xv.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let lse = kernels::log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = xv.shape().to_vec();
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Columns `[start, start + len)` of a matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let shape = vec![xv.rows(), len];
        self.push("slice_cols", Tensor::from_parts(shape, data), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols;
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Rows of `x` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), c], data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Repeats the columns of every row `reps` times side by side.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.len() * reps);
        for row in xv.data().chunks(c) {
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let shape = vec![xv.rows(), c * reps];
        self.push("tile_cols", Tensor::from_parts(shape, data), Op::TileCols { x, reps }, &[x])
    }

    /// `out[r] = x[r, idx[r]]`, shaped `rows x 1`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if idx.len() != xv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                left: xv.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    bound: c,
                });
            }
            data.push(xv.data()[r * c + i]);
        }
        self.push(
            "pick",
            Tensor::from_parts(vec![idx.len(), 1], data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// `out[r, c] = -||y_r - codebook_c||^2`.
    pub fn neg_sq_dist(&mut self, y: Var, codebook: Var) -> Result<Var> {
        let (yv, ev) = (self.value(y), self.value(codebook));
        let p = yv.cols();
        if ev.cols() != p {
            return Err(NumericsError::ShapeMismatch {
                op: "neg_sq_dist",
                left: yv.shape().to_vec(),
                right: ev.shape().to_vec(),
            });
        }
        let classes = ev.rows();
        let mut data = Vec::with_capacity(yv.rows() * classes);
        for row in yv.data().chunks(p) {
            for e in ev.data().chunks(p) {
                data.push(-row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            }
        }
        let shape = vec![yv.rows(), classes];
        self.push(
            "neg_sq_dist",
            Tensor::from_parts(shape, data),
            Op::NegSqDist { y, codebook },
            &[y, codebook],
        )
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if targets.len() != lv.rows() || weights.len() != lv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, row) in lv.data().chunks(c).enumerate() {
            let t = targets[r];
            if t >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            kernels::softmax_into(row, &mut probs[r * c..(r + 1) * c]);
            total += weights[r] * (kernels::log_sum_exp(row) - row[t]);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `sum_r w_r * sum_c (pred[r, c] - target[r, c])^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || weights.len() != pv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_sq_err",
                left: pv.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let c = pv.cols();
        let mut total = 0.0;
        for (r, (row, trow)) in pv.data().chunks(c).zip(target.data().chunks(c)).enumerate() {
            total += weights[r] * row.iter().zip(trow).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        self.push(
            "weighted_sq_err",
            Tensor::scalar(total),
            Op::WeightedSqErr {
                pred,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
            },
            &[pred],
        )
    }

    /// Causal multi-head attention of stacked `(tokens x dim)` projections.
    ///
    /// Each segment attends only within itself; with `window = Some(w)`,
    /// query `t` sees keys `t - w + 1 ..= t`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        window: Option<usize>,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let qv = self.value(q);
        let dim = qv.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::InvalidShape(vec![dim, heads]));
        }
        let covered: usize = segments.iter().map(|s| s.start + s.len).max().unwrap_or(0);
        if covered > qv.rows() {
            return Err(NumericsError::IndexOutOfRange {
                op: "attention",
                index: covered,
                bound: qv.rows(),
            });
        }
        let (out, probs, muls) = kernels::attention_forward(
            qv.data(),
            self.value(k).data(),
            self.value(v).data(),
            dim,
            heads,
            segments,
            window,
        );
        let shape = qv.shape().to_vec();
        self.attention_muls += muls;
        self.push(
            "attention",
            Tensor::from_parts(shape, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                window,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Softmax weights recorded by an attention node, in kernel order.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        self.push("dropout", Tensor::from_parts(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Elementwise `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
    pub fn clipped_surrogate(&mut self, ratio: Var, adv: &[f64], eps: f64) -> Result<Var> {
        let rv = self.value(ratio);
        if rv.len() != adv.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "clipped_surrogate",
                left: rv.shape().to_vec(),
                right: vec![adv.len()],
            });
        }
        let data = rv
            .data()
            .iter()
            .zip(adv)
            .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
            .collect();
        let shape = rv.shape().to_vec();
        self.push(
            "clipped_surrogate",
            Tensor::from_parts(shape, data),
            Op::ClippedSurrogate {
                ratio,
                adv: adv.to_vec(),
                eps,
            },
            &[ratio],
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                if !t.is_finite() {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
                leaves.insert(i, t);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let c = out.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = out.cols();
                let gamma = self.value(*gain).data();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * nrow[j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dn = vec![0.0; c];
                    for (r, (row, nrow)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..c {
                            dn[j] = row[j] * gamma[j];
                            mean_dn += dn[j];
                            mean_dn_n += dn[j] * nrow[j];
                        }
                        mean_dn /= c as f64;
                        mean_dn_n /= c as f64;
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += rstd[r] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((dst, row), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot = kernels::dot(row, y);
                        for j in 0..c {
                            dst[j] += y[j] * (row[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((dst, row), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let total: f64 = row.iter().sum();
                        for j in 0..c {
                            dst[j] += row[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (dst, row) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut dst[*start..start + len], row);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (dst, row) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(dst, &row[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, &i) in g.chunks(c).zip(idx) {
                        add_into(&mut gx[i * c..(i + 1) * c], row);
                    }
                }
            }
            Op::TileCols { x, reps } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (dst, row) in gx.chunks_mut(c).zip(g.chunks(c * reps)) {
                        for chunk in row.chunks(c) {
                            add_into(dst, chunk);
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                }
            }
            Op::NegSqDist { y, codebook } => {
                let (yv, ev) = (self.value(*y), self.value(*codebook));
                let (p, classes) = (yv.cols(), ev.rows());
                if let Some(gy) = self.acc(grads, *y) {
                    for (r, yrow) in yv.data().chunks(p).enumerate() {
                        for (c, e) in ev.data().chunks(p).enumerate() {
                            let s = -2.0 * g[r * classes + c];
                            for k in 0..p {
                                gy[r * p + k] += s * (yrow[k] - e[k]);
                            }
                        }
                    }
                }
                if let Some(ge) = self.acc(grads, *codebook) {
                    for (r, yrow) in yv.data().chunks(p).enumerate() {
                        for (c, e) in ev.data().chunks(p).enumerate() {
                            let s = 2.0 * g[r * classes + c];
                            for k in 0..p {
                                ge[c * p + k] += s * (yrow[k] - e[k]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let s = g[0] * w;
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                if let Some(gp) = self.acc(grads, *pred) {
                    for (i, (&a, &b)) in pv.data().iter().zip(target).enumerate() {
                        gp[i] += g[0] * 2.0 * weights[i / c] * (a - b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                window,
                probs,
            } => {
                let dim = out.cols();
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    dim,
                    *heads,
                    segments,
                    *window,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gv) = self.acc(grads, var) {
                        add_into(gv, &d);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::ClippedSurrogate { ratio, adv, eps } => {
                let rv = self.value(*ratio).data();
                if let Some(gr) = self.acc(grads, *ratio) {
                    for (i, (&r, &a)) in rv.iter().zip(adv).enumerate() {
                        let unclipped = r * a;
                        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
                        if unclipped <= clipped {
                            gr[i] += g[i] * a;
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the leaf does not influence the loss
    /// or was not marked as requiring gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.remove(&v.0)
    }
}
