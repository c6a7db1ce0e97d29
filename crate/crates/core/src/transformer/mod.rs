//! Causal pre-norm transformer trunk with dense, sliding-window and
//! head-shared attention.
//!
//! Tokens of several sequences are stacked row-wise into one matrix and
//! described by [`Segment`]s; linear layers run on the whole stack while
//! attention stays inside each segment.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::numerics::{Binder, Graph, NumericsError, ParamSet, Segment, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransformerError {
    #[error("model_dim {model_dim} is not divisible by num_heads {num_heads}")]
    HeadSplit { model_dim: usize, num_heads: usize },
    #[error("attention window {window} outside 1..={max}")]
    Window { window: usize, max: usize },
    #[error("sequence of {len} tokens exceeds max_sequence_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, TransformerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionVariant {
    Dense,
    Sparse { window: usize },
    SharedHeads,
    SparseShared { window: usize },
}

impl AttentionVariant {
    pub fn window(self) -> Option<usize> {
        match self {
            Self::Sparse { window } | Self::SparseShared { window } => Some(window),
            Self::Dense | Self::SharedHeads => None,
        }
    }

    pub fn shared(self) -> bool {
        matches!(self, Self::SharedHeads | Self::SparseShared { .. })
    }
}

/// Default sliding window, in tokens.
pub const DEFAULT_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub attention: AttentionVariant,
    pub max_sequence_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            model_dim: 64,
            num_heads: 8,
            ffn_dim: 128,
            dropout_rate: 0.1,
            attention: AttentionVariant::Dense,
            max_sequence_len: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(TransformerError::HeadSplit {
                model_dim: self.model_dim,
                num_heads: self.num_heads,
            });
        }
        if let Some(w) = self.attention.window() {
            if w == 0 || w > self.max_sequence_len {
                return Err(TransformerError::Window {
                    window: w,
                    max: self.max_sequence_len,
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn with_attention(mut self, attention: AttentionVariant) -> Self {
        self.attention = attention;
        self
    }

    /// Width of each query/key/value projection.
    fn qkv_width(&self) -> usize {
        if self.attention.shared() {
            self.head_dim()
        } else {
            self.model_dim
        }
    }
}

/// Exact number of learnable scalars in the trunk.
pub fn count_parameters(config: &TransformerConfig) -> usize {
    config.num_blocks * block_parameters(config)
}

/// Learnable scalars in one block.
pub fn block_parameters(config: &TransformerConfig) -> usize {
    let d = config.model_dim;
    let w = config.qkv_width();
    let f = config.ffn_dim;
    let qkv = 3 * (d * w + w);
    let head_bias = if config.attention.shared() { (config.num_heads - 1) * w } else { 0 };
    let out = d * d + d;
    let norms = 4 * d;
    let ffn = d * f + f + f * d + d;
    qkv + head_bias + out + norms + ffn
}

fn block_prefix(prefix: &str, i: usize) -> String {
    format!("{prefix}block{i}.")
}

/// Freshly initialized trunk parameters named `{prefix}block{i}.*`.
pub fn init_params<R: Rng + ?Sized>(config: &TransformerConfig, prefix: &str, rng: &mut R) -> ParamSet {
    let d = config.model_dim;
    let w = config.qkv_width();
    let f = config.ffn_dim;
    let resid_scale = 1.0 / ((2 * config.num_blocks.max(1)) as f64).sqrt();
    let mut p = ParamSet::new();
    for i in 0..config.num_blocks {
        let b = block_prefix(prefix, i);
        p.insert(format!("{b}ln1.gain"), Tensor::full(&[d], 1.0));
        p.insert(format!("{b}ln1.bias"), Tensor::zeros(&[d]));
        for name in ["q", "k", "v"] {
            p.insert(format!("{b}attn.w{name}"), Tensor::randn(&[d, w], 1.0 / (d as f64).sqrt(), rng));
            p.insert(format!("{b}attn.b{name}"), Tensor::zeros(&[w]));
        }
        if config.attention.shared() && config.num_heads > 1 {
            p.insert(format!("{b}attn.head_bias"), Tensor::randn(&[config.num_heads - 1, w], 0.1, rng));
        }
        p.insert(
            format!("{b}attn.wo"),
            Tensor::randn(&[d, d], resid_scale / (d as f64).sqrt(), rng),
        );
        p.insert(format!("{b}attn.bo"), Tensor::zeros(&[d]));
        p.insert(format!("{b}ln2.gain"), Tensor::full(&[d], 1.0));
        p.insert(format!("{b}ln2.bias"), Tensor::zeros(&[d]));
        p.insert(format!("{b}ffn.w1"), Tensor::randn(&[d, f], 1.0 / (d as f64).sqrt(), rng));
        p.insert(format!("{b}ffn.b1"), Tensor::zeros(&[f]));
        p.insert(
            format!("{b}ffn.w2"),
            Tensor::randn(&[f, d], resid_scale / (f as f64).sqrt(), rng),
        );
        p.insert(format!("{b}ffn.b2"), Tensor::zeros(&[d]));
    }
    p
}

/// Dropout source for training passes; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

fn linear(g: &mut Graph, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var> {
    let wv = b.var(g, w)?;
    let bv = b.var(g, bias)?;
    let h = g.matmul(x, wv)?;
    Ok(g.add_row(h, bv)?)
}

fn check_segments(config: &TransformerConfig, segments: &[Segment]) -> Result<()> {
    for s in segments {
        if s.len > config.max_sequence_len {
            return Err(TransformerError::SequenceTooLong {
                len: s.len,
                max: config.max_sequence_len,
            });
        }
    }
    Ok(())
}

/// Multi-head causal self-attention of block `block`, including the output
/// projection.
pub fn causal_attention(
    g: &mut Graph,
    b: &mut Binder,
    config: &TransformerConfig,
    prefix: &str,
    block: usize,
    x: Var,
    segments: &[Segment],
) -> Result<Var> {
    Ok(attention_core(g, b, config, prefix, block, x, segments)?.1)
}

/// Returns the raw attention node and the projected output.
fn attention_core(
    g: &mut Graph,
    b: &mut Binder,
    config: &TransformerConfig,
    prefix: &str,
    block: usize,
    x: Var,
    segments: &[Segment],
) -> Result<(Var, Var)> {
    check_segments(config, segments)?;
    let p = block_prefix(prefix, block);
    let q = linear(g, b, x, &format!("{p}attn.wq"), &format!("{p}attn.bq"))?;
    let k = linear(g, b, x, &format!("{p}attn.wk"), &format!("{p}attn.bk"))?;
    let v = linear(g, b, x, &format!("{p}attn.wv"), &format!("{p}attn.bv"))?;
    let heads = config.num_heads;
    let (q, k, v) = if config.attention.shared() {
        // one projection triplet for every head; heads after the first add a
        // learned query offset
        let q = if heads > 1 {
            let hb = b.var(g, &format!("{p}attn.head_bias"))?;
            let rest = g.tile_cols(q, heads - 1)?;
            let rest = g.add_row(rest, hb)?;
            g.concat_cols(&[q, rest])?
        } else {
            q
        };
        (q, g.tile_cols(k, heads)?, g.tile_cols(v, heads)?)
    } else {
        (q, k, v)
    };
    let att = g.attention(q, k, v, heads, segments, config.attention.window())?;
    let out = linear(g, b, att, &format!("{p}attn.wo"), &format!("{p}attn.bo"))?;
    Ok((att, out))
}

fn block_forward(
    g: &mut Graph,
    b: &mut Binder,
    config: &TransformerConfig,
    prefix: &str,
    i: usize,
    x: Var,
    segments: &[Segment],
    rng: &mut DropoutRng,
) -> Result<(Var, Var)> {
    let p = block_prefix(prefix, i);
    let (g1, b1) = (b.var(g, &format!("{p}ln1.gain"))?, b.var(g, &format!("{p}ln1.bias"))?);
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let (att, a) = attention_core(g, b, config, prefix, i, h, segments)?;
    let a = maybe_dropout(g, a, config.dropout_rate, rng)?;
    let x = g.add(x, a)?;
    let (g2, b2) = (b.var(g, &format!("{p}ln2.gain"))?, b.var(g, &format!("{p}ln2.bias"))?);
    let h = g.layer_norm(x, g2, b2, LN_EPS)?;
    let h = linear(g, b, h, &format!("{p}ffn.w1"), &format!("{p}ffn.b1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, b, h, &format!("{p}ffn.w2"), &format!("{p}ffn.b2"))?;
    let h = maybe_dropout(g, h, config.dropout_rate, rng)?;
    Ok((g.add(x, h)?, att))
}

const LN_EPS: f64 = 1e-5;

fn maybe_dropout(g: &mut Graph, x: Var, p: f64, rng: &mut DropoutRng) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => Ok(g.dropout(x, p, r)?),
        _ => Ok(x),
    }
}

/// Runs every block: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
pub fn forward(
    g: &mut Graph,
    b: &mut Binder,
    config: &TransformerConfig,
    prefix: &str,
    tokens: Var,
    segments: &[Segment],
    mut rng: DropoutRng,
) -> Result<Var> {
    config.validate()?;
    let mut x = tokens;
    for i in 0..config.num_blocks {
        x = block_forward(g, b, config, prefix, i, x, segments, &mut rng)?.0;
    }
    Ok(x)
}

/// Per-head `T x T` attention weight matrices of one block for a single
/// sequence, evaluated in inference mode. Masked entries are exactly zero.
pub fn attention_weights(
    params: &ParamSet,
    config: &TransformerConfig,
    prefix: &str,
    block: usize,
    tokens: &Tensor,
) -> Result<Vec<Tensor>> {
    let t = tokens.rows();
    let segs = [Segment::new(0, t)];
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let mut x = g.constant(tokens.clone());
    let mut none: DropoutRng = None;
    for i in 0..block {
        x = block_forward(&mut g, &mut b, config, prefix, i, x, &segs, &mut none)?.0;
    }
    let p = block_prefix(prefix, block);
    let (g1, b1) = (b.var(&mut g, &format!("{p}ln1.gain"))?, b.var(&mut g, &format!("{p}ln1.bias"))?);
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let (att, _) = attention_core(&mut g, &mut b, config, prefix, block, h, &segs)?;
    let probs = g.attention_probs(att).expect("attention node");
    let window = config.attention.window();
    let mut mats = vec![vec![0.0; t * t]; config.num_heads];
    let mut cursor = 0;
    for m in mats.iter_mut() {
        for q in 0..t {
            let j0 = crate::numerics::kernels::window_start(q, window);
            for j in j0..=q {
                m[q * t + j] = probs[cursor];
                cursor += 1;
            }
        }
    }
    Ok(mats
        .into_iter()
        .map(|m| Tensor::matrix(t, t, m).expect("square"))
        .collect())
}

/// Scalar multiplications spent on attention scores and weighted sums for
/// one sequence of `seq_len` tokens, counted by the instrumented kernel.
pub fn attention_cost(seq_len: usize, model_dim: usize, num_heads: usize, variant: AttentionVariant) -> u64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seq_len as u64);
    let shape = [seq_len, model_dim];
    let mut g = Graph::new();
    let q = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let k = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let v = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    g.attention(q, k, v, num_heads, &[Segment::new(0, seq_len)], variant.window())
        .expect("valid attention shapes");
    g.attention_muls()
}

#[cfg(test)]
mod tests;
