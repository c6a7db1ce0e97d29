//! Episodic wireless simulators with a common stepping interface.

mod irs;
mod mobility;
mod uav;

pub use irs::{compute_rate, Channel, IrsEnv, IrsScenario};
pub use mobility::{mobility_step, MobilityParams, UserMotion};
pub use uav::{UavEnv, UavScenario, DIRECTIONS};

use serde::{Deserialize, Serialize};

use crate::dt::{ActionSpace, HybridAction};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action {0:?} is not legal for this scenario")]
    IllegalAction(HybridAction),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> &ActionSpace;
    fn episode_len(&self) -> usize;
    /// Starts a fresh episode; the same seed yields the same episode.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &HybridAction) -> Result<Step, EnvError>;
    /// Constraint and configuration entries of the prompt (fixed length per task).
    fn prompt_features(&self) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Irs,
    Uav,
}

/// Scenario parameters of either task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Irs(IrsScenario),
    Uav(UavScenario),
}

impl ScenarioSpec {
    pub fn task(&self) -> Task {
        match self {
            Self::Irs(_) => Task::Irs,
            Self::Uav(_) => Task::Uav,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            Self::Irs(s) => s.validate(),
            Self::Uav(s) => s.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self {
            Self::Irs(s) => Box::new(IrsEnv::new(s.clone())?),
            Self::Uav(s) => Box::new(UavEnv::new(s.clone())?),
        })
    }
}

/// A scenario together with its registry key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(flatten)]
    pub spec: ScenarioSpec,
}

/// Return of one episode with uniformly random actions.
pub fn random_episode_return(env: &mut dyn Environment, seed: u64) -> Result<f64, EnvError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4a11);
    env.reset(seed);
    let space = env.action_space().clone();
    let mut total = 0.0;
    loop {
        let step = env.step(&space.sample(&mut rng))?;
        total += step.reward;
        if step.done {
            return Ok(total);
        }
    }
}

#[cfg(test)]
mod tests;
