use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TRUNK;
use super::{DtError, DtModel, ScenarioEntry, Trajectory};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Binder, Graph, Var};

/// Optimizer loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl Schedule {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn lr(mut self, lr: f64) -> Self {
        self.optimizer.lr = lr;
        self
    }
}

/// Parameter group selectable for freezing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "snake_case")]
pub enum ParamGroup {
    /// Every transformer block.
    Trunk,
    /// Blocks `0..count` of the trunk.
    LowerBlocks { count: usize },
    TrunkBlock { index: usize },
    /// Shared return, prompt and timestep embeddings.
    Embeddings,
    Adapter { scenario: String },
    Adapters,
}

impl ParamGroup {
    fn contains(&self, name: &str) -> bool {
        let block = || {
            name.strip_prefix(TRUNK)
                .and_then(|r| r.strip_prefix("block"))
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
        };
        match self {
            Self::Trunk => name.starts_with(TRUNK),
            Self::LowerBlocks { count } => block().is_some_and(|i| i < *count),
            Self::TrunkBlock { index } => block() == Some(*index),
            Self::Embeddings => name.starts_with("embed."),
            Self::Adapter { scenario } => name.starts_with(&format!("adapter.{scenario}.")),
            Self::Adapters => name.starts_with("adapter."),
        }
    }
}

/// Groups held fixed during fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeSpec {
    pub frozen: Vec<ParamGroup>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn trunk() -> Self {
        Self {
            frozen: vec![ParamGroup::Trunk],
        }
    }

    pub fn lower_blocks(count: usize) -> Self {
        Self {
            frozen: vec![ParamGroup::LowerBlocks { count }],
        }
    }

    pub fn everything() -> Self {
        Self {
            frozen: vec![ParamGroup::Trunk, ParamGroup::Embeddings, ParamGroup::Adapters],
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|g| g.contains(name))
    }

    pub fn validate(&self, num_blocks: usize) -> Result<(), DtError> {
        for g in &self.frozen {
            match g {
                ParamGroup::LowerBlocks { count } if *count > num_blocks => {
                    return Err(DtError::Config(format!("cannot freeze {count} of {num_blocks} blocks")))
                }
                ParamGroup::TrunkBlock { index } if *index >= num_blocks => {
                    return Err(DtError::Config(format!("block {index} does not exist")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Draws `count` windows `(trajectory, start, end)`: scenario uniformly,
/// then a trajectory, then an end step, with up to `k` steps of context.
pub fn sample_windows<'a, R: Rng + ?Sized>(
    by_scenario: &[Vec<&'a Trajectory>],
    count: usize,
    k: usize,
    rng: &mut R,
) -> Vec<(&'a Trajectory, usize, usize)> {
    (0..count)
        .map(|_| {
            let pool = &by_scenario[rng.gen_range(0..by_scenario.len())];
            let t = pool[rng.gen_range(0..pool.len())];
            let end = rng.gen_range(1..=t.len());
            (t, end.saturating_sub(k), end)
        })
        .collect()
}

fn group_by_scenario(data: &[Trajectory]) -> Vec<Vec<&Trajectory>> {
    let mut m: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for t in data.iter().filter(|t| !t.is_empty()) {
        m.entry(&t.scenario_id).or_default().push(t);
    }
    m.into_values().collect()
}

/// Extra loss term added to every training step.
pub(crate) type ExtraLoss<'a> = &'a dyn Fn(&mut Graph, &mut Binder) -> Result<Option<Var>, DtError>;

/// Optimization loop shared by pre-training, fine-tuning and distillation;
/// returns the per-step training loss.
pub(crate) fn train_loop(
    model: &mut DtModel,
    data: &[Trajectory],
    schedule: &Schedule,
    trainable: &dyn Fn(&str) -> bool,
    seed: u64,
    extra: Option<ExtraLoss>,
) -> Result<Vec<f64>, DtError> {
    let pools = group_by_scenario(data);
    if pools.is_empty() {
        return Err(DtError::EmptyDataset);
    }
    for p in &pools {
        model.scenario(&p[0].scenario_id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(schedule.optimizer.clone());
    let mut curve = Vec::with_capacity(schedule.steps);
    for _ in 0..schedule.steps {
        let windows = sample_windows(&pools, schedule.batch_size, model.config.context_len, &mut rng);
        let mut g = Graph::new();
        let params = model.params.clone();
        let mut b = Binder::with_filter(&params, trainable);
        let mut loss = model.loss(&mut g, &mut b, &windows, Some(&mut rng))?;
        if let Some(f) = extra {
            if let Some(t) = f(&mut g, &mut b)? {
                loss = g.add(loss, t)?;
            }
        }
        curve.push(g.value(loss).item());
        let mut grads = g.backward(loss)?;
        let mut named = b.collect(&mut grads);
        if let Some(max) = schedule.grad_clip {
            clip_grad_norm(&mut named, max);
        }
        opt.step(&mut model.params, &named)?;
    }
    Ok(curve)
}

/// Supervised training over every scenario in `data`.
pub fn pretrain(model: &mut DtModel, data: &[Trajectory], schedule: &Schedule, seed: u64) -> Result<Vec<f64>, DtError> {
    train_loop(model, data, schedule, &|_| true, seed, None)
}

/// Adapts `model` to `entry` from a few trajectories.
///
/// Adapters for an unseen scenario are seeded from the nearest registered
/// one; groups in `freeze` are left bit-identical.
pub fn finetune(
    model: &mut DtModel,
    entry: ScenarioEntry,
    few_shot: &[Trajectory],
    freeze: &FreezeSpec,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<f64>, DtError> {
    if few_shot.is_empty() {
        return Err(DtError::EmptyDataset);
    }
    freeze.validate(model.config.transformer.num_blocks)?;
    if let Some(t) = few_shot.iter().find(|t| t.scenario_id != entry.id) {
        return Err(DtError::UnknownScenario(t.scenario_id.clone()));
    }
    match model.scenarios.get_mut(&entry.id) {
        Some(known) => {
            if known.state_dim != entry.state_dim {
                return Err(DtError::DimensionMismatch {
                    what: "state",
                    expected: known.state_dim,
                    got: entry.state_dim,
                });
            }
            if known.action_space != entry.action_space {
                return Err(DtError::Config(format!("action space of `{}` changed", entry.id)));
            }
            // the embedding scale stays fixed; only the target range widens
            known.max_return = known.max_return.max(entry.max_return);
            known.min_return = known.min_return.min(entry.min_return);
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
            model.add_scenario_from_nearest(entry, &mut rng)?;
        }
    }
    let frozen_before: Vec<(String, Vec<u64>)> = model
        .params
        .iter()
        .filter(|(n, _)| freeze.is_frozen(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect();
    let curve = train_loop(model, few_shot, schedule, &|n| !freeze.is_frozen(n), seed, None)?;
    for (name, bits) in frozen_before {
        let now = model.params.get(&name).expect("frozen parameter kept");
        if now.data().iter().map(|x| x.to_bits()).ne(bits) {
            return Err(DtError::FrozenModified(name));
        }
    }
    Ok(curve)
}

