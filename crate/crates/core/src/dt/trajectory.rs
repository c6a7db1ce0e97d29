use serde::{Deserialize, Serialize};

use super::{DtError, HybridAction};

/// Suffix sums `R_t = r_t + R_{t+1}`, accumulated from the end.
pub fn compute_returns_to_go(rewards: &[f64]) -> Result<Vec<f64>, DtError> {
    if rewards.is_empty() {
        return Err(DtError::EmptyTrajectory);
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(DtError::NonFinite("reward"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// One logged episode with its returns-to-go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_id: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<HybridAction>,
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
    pub expert: bool,
}

impl Trajectory {
    pub fn new(
        scenario_id: impl Into<String>,
        states: Vec<Vec<f64>>,
        actions: Vec<HybridAction>,
        rewards: Vec<f64>,
        expert: bool,
    ) -> Result<Self, DtError> {
        if states.len() != rewards.len() || actions.len() != rewards.len() {
            return Err(DtError::LengthMismatch {
                states: states.len(),
                actions: actions.len(),
                rewards: rewards.len(),
            });
        }
        let returns_to_go = compute_returns_to_go(&rewards)?;
        if states.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DtError::NonFinite("state"));
        }
        Ok(Self {
            scenario_id: scenario_id.into(),
            states,
            actions,
            rewards,
            returns_to_go,
            expert,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.returns_to_go[0]
    }
}
