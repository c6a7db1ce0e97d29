//! Return-conditioned decision transformer over hybrid action spaces.

mod action;
mod checkpoint;
mod model;
mod rollout;
mod similarity;
mod train;
mod trajectory;


pub use action::{ActionSpace, HybridAction};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{code_dim, nearest_row, ActionCodec, DtConfig, DtModel, ScenarioEntry, SeqInput, TRUNK};
pub use rollout::{evaluate, rollout, Episode, RolloutContext};
pub use similarity::{distill, init_student, similarity_loss, similarity_term, ParamMapping, TeacherSource};
pub use train::{finetune, pretrain, sample_windows, FreezeSpec, ParamGroup, Schedule};
pub use trajectory::{compute_returns_to_go, Trajectory};

use crate::env::EnvError;
use crate::numerics::NumericsError;
use crate::transformer::TransformerError;

#[derive(Debug, thiserror::Error)]
pub enum DtError {
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("no usable trajectories")]
    EmptyDataset,
    #[error("length mismatch: {states} states, {actions} actions, {rewards} rewards")]
    LengthMismatch { states: usize, actions: usize, rewards: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("discrete action part with no categories")]
    EmptyCodebook,
    #[error("action {0:?} is outside the action space")]
    IllegalAction(HybridAction),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario `{0}` is already registered")]
    ScenarioExists(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frozen parameter `{0}` changed during fine-tuning")]
    FrozenModified(String),
    #[error("student parameter `{0}` has no teacher counterpart")]
    Unmapped(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Env(#[from] EnvError),
}
