use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericsError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            let decay = 1.0 - c.lr * c.weight_decay;
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * gi;
                m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                *w = *w * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(NumericsError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
