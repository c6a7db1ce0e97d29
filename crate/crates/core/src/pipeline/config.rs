use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dt::{DtConfig, FreezeSpec, Schedule};
use crate::env::{Scenario, Task};
use crate::ppo::PpoConfig;

/// Everything a pipeline command needs besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Scenarios the cloud model is pre-trained on.
    pub scenarios: Vec<Scenario>,
    /// Unseen scenario for fine-tuning and comparison.
    pub target: Scenario,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub collect: CollectSpec,
    #[serde(default)]
    pub model: DtConfig,
    #[serde(default = "paper_schedule")]
    pub pretrain: Schedule,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub evaluate: EvalSpec,
    #[serde(default)]
    pub compare: CompareSpec,
    #[serde(default)]
    pub paths: PathOverrides,
}

/// Batch 64 and learning rate 1e-4.
fn paper_schedule() -> Schedule {
    Schedule::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSpec {
    /// PPO environment steps per source scenario.
    pub ppo_steps: usize,
    /// Argmax episodes rolled out from the trained policy.
    pub greedy_episodes: usize,
    /// Sampled episodes rolled out from the trained policy.
    pub sampled_episodes: usize,
    /// Percentile of late training returns that marks an episode expert.
    pub expert_percentile: f64,
}

impl Default for CollectSpec {
    fn default() -> Self {
        Self {
            ppo_steps: 204_800,
            greedy_episodes: 150,
            sampled_episodes: 150,
            expert_percentile: 80.0,
        }
    }
}

/// Where few-shot episodes in the new scenario come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FewShotSource {
    /// Last episodes of a PPO run trained from scratch for `steps`.
    Ppo { steps: usize },
    /// Rollouts of the transplanted, not yet tuned model.
    Dt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    pub episodes: usize,
    pub source: FewShotSource,
    pub freeze: FreezeSpec,
    pub schedule: Schedule,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            episodes: 50,
            source: FewShotSource::Ppo { steps: 20_480 },
            freeze: FreezeSpec::lower_blocks(2),
            schedule: Schedule::with_steps(300),
        }
    }
}

/// Desired return fed to the model at the first step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Largest return in the scenario's training data.
    Max,
    Min,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Pretrained,
    Finetuned,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub episodes: usize,
    pub target: TargetRule,
    pub policy: EvalPolicy,
    /// Scenario to evaluate; the target scenario when absent.
    pub scenario: Option<String>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: 20,
            target: TargetRule::Max,
            policy: EvalPolicy::Finetuned,
            scenario: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    /// Environment steps charged to each arm.
    pub budget: usize,
    /// Fine-tuning steps at the first curve point.
    pub first_steps: usize,
    /// Further fine-tuning steps at every later point.
    pub steps_per_point: usize,
    /// Greedy episodes behind each fine-tuned curve point.
    pub eval_episodes: usize,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            budget: 163_840,
            first_steps: 300,
            steps_per_point: 60,
            eval_episodes: 5,
        }
    }
}

/// Input files; each defaults to its name inside the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathOverrides {
    pub dataset: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.scenarios.is_empty() {
            return bad("at least one pre-training scenario is required".into());
        }
        let mut ids = BTreeSet::new();
        for s in self.scenarios.iter().chain([&self.target]) {
            if s.spec.task() != self.task {
                return bad(format!("scenario `{}` does not belong to task {:?}", s.id, self.task));
            }
            if !ids.insert(s.id.as_str()) {
                return bad(format!("scenario id `{}` is defined twice", s.id));
            }
            s.spec.validate()?;
        }
        if let Some(id) = &self.evaluate.scenario {
            if !ids.contains(id.as_str()) {
                return bad(format!("evaluation scenario `{id}` is not defined"));
            }
        }
        self.ppo.validate()?;
        self.model.validate()?;
        for (what, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune.schedule)] {
            if s.batch_size == 0 {
                return bad(format!("{what} batch_size must be positive"));
            }
        }
        self.finetune.freeze.validate(self.model.transformer.num_blocks)?;
        if self.finetune.episodes == 0 || self.evaluate.episodes == 0 || self.compare.eval_episodes == 0 {
            return bad("episode counts must be positive".into());
        }
        if !(0.0..=100.0).contains(&self.collect.expert_percentile) {
            return bad("expert_percentile must lie in [0, 100]".into());
        }
        if self.compare.budget < self.ppo.rollout_steps {
            return bad("compare budget is smaller than one PPO batch".into());
        }
        Ok(())
    }

    /// Any defined scenario by id.
    pub fn scenario(&self, id: &str) -> Option<&Scenario> {
        self.scenarios.iter().chain([&self.target]).find(|s| s.id == id)
    }

    pub fn dataset_path(&self, out: &Path) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| out.join(DATASET_FILE))
    }

    pub fn pretrained_path(&self, out: &Path) -> PathBuf {
        self.paths.pretrained.clone().unwrap_or_else(|| out.join(PRETRAINED_FILE))
    }

    pub fn finetuned_path(&self, out: &Path) -> PathBuf {
        self.paths.finetuned.clone().unwrap_or_else(|| out.join(FINETUNED_FILE))
    }
}
