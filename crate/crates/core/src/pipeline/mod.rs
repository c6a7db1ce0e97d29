//! Cloud-edge workflow: collect, pretrain, finetune, evaluate and compare,
//! with the dataset file format, run configuration and metric tables.

mod commands;
mod config;
mod dataset;
mod metrics;
pub mod stats;


pub use commands::{
    cmd_collect, cmd_compare, cmd_evaluate, cmd_finetune, cmd_pretrain, random_curve, CollectReport, CompareReport,
    EvalReport, FinetuneReport, PretrainReport, ARMS,
};
pub use config::{
    CollectSpec, CompareSpec, EvalPolicy, EvalSpec, FewShotSource, FinetuneSpec, PathOverrides, RunConfig, TargetRule,
    DATASET_FILE, FINETUNED_FILE, PRETRAINED_FILE,
};
pub use dataset::{load_dataset, save_dataset, DatasetFile, DATASET_VERSION};
pub use metrics::{csv_writer, wall_path, MetricRow, MetricsTable};

use crate::dt::DtError;
use crate::env::EnvError;
use crate::ppo::PpoError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed dataset header: {0}")]
    Header(String),
    #[error("unsupported dataset version {0}")]
    DatasetVersion(u32),
    #[error("dataset record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("metrics table: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dt(#[from] DtError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
}
