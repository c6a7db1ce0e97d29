use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{EvalPolicy, FewShotSource, RunConfig, TargetRule, FINETUNED_FILE, PRETRAINED_FILE, DATASET_FILE};
use super::dataset::{load_dataset, save_dataset, DatasetFile};
use super::metrics::{csv_writer, MetricRow, MetricsTable};
use super::stats::{speedup, Speedup};
use super::PipelineError;
use crate::dt::{
    finetune, load_checkpoint, pretrain, rollout, save_checkpoint, DtError, DtModel, ScenarioEntry, Schedule, Trajectory,
};
use crate::env::{random_episode_return, Environment, Scenario};
use crate::ppo::{self, collect_dataset, mean_std, percentile, BatchReport, CurvePoint};

type Result<T> = std::result::Result<T, PipelineError>;

/// Arm names in the order they appear in the comparison table.
pub const ARMS: [&str; 3] = ["dt_ft", "ppo", "random"];

const EVAL_SEEDS: u64 = 1 << 40;
// stream tags for sub-seeds
const INIT: u64 = 1;
const TRAIN: u64 = 2;
const FEW_SHOT: u64 = 3;
const TUNE: u64 = 4;
const TRANSPLANT: u64 = 5;
const PPO_RUN: u64 = 6;
const RANDOM_ARM: u64 = 7;
const COLLECT: u64 = 8;

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// First environment seed of evaluation episodes; disjoint from training seeds.
fn eval_seed(seed: u64) -> u64 {
    EVAL_SEEDS.wrapping_add(seed << 20)
}

fn entry_for(env: &dyn Environment, id: &str, data: &[Trajectory]) -> Result<ScenarioEntry> {
    let refs: Vec<&Trajectory> = data.iter().collect();
    Ok(ScenarioEntry::from_data(
        id,
        env.state_dim(),
        env.action_space().clone(),
        env.prompt_features(),
        &refs,
    )?)
}

fn target_return(rule: TargetRule, entry: &ScenarioEntry) -> f64 {
    match rule {
        TargetRule::Max => entry.max_return,
        TargetRule::Min => entry.min_return,
        TargetRule::Value(v) => v,
    }
}

/// Greedy returns of `episodes` rollouts.
fn dt_returns(
    model: &DtModel,
    id: &str,
    env: &mut dyn Environment,
    first_seed: u64,
    episodes: usize,
    target: f64,
) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|i| Ok(rollout(model, id, env, first_seed.wrapping_add(i), target)?.total_return()))
        .collect()
}

fn row(phase: &str, scenario: &str, step: usize, values: (f64, f64), start: &Instant) -> MetricRow {
    MetricRow {
        phase: phase.into(),
        scenario_id: scenario.into(),
        step,
        mean_return: values.0,
        std_return: values.1,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv_writer(path, &["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.serialize((i + 1, l))?;
    }
    w.flush()?;
    Ok(())
}

pub struct CollectReport {
    pub dataset: DatasetFile,
    pub metrics: MetricsTable,
}

/// Trains PPO on every source scenario and stores greedy and sampled
/// episodes of the trained policies as one dataset.
pub fn cmd_collect(cfg: &RunConfig, seed: u64, out: &Path) -> Result<CollectReport> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut metrics = MetricsTable::new();
    let mut trajectories = Vec::new();
    for (i, sc) in cfg.scenarios.iter().enumerate() {
        let mut env = sc.spec.build()?;
        let run_seed = sub_seed(seed, COLLECT).wrapping_add(i as u64);
        let run = ppo::train(env.as_mut(), &sc.id, &cfg.ppo, cfg.collect.ppo_steps, run_seed)?;
        for p in &run.curve {
            metrics.push(row("ppo", &sc.id, p.env_steps, (p.mean_return, p.std_return), &start))?;
        }
        let late: Vec<f64> = run.recent.iter().rev().take(200).map(Trajectory::total_return).collect();
        let threshold = percentile(&late, cfg.collect.expert_percentile);
        let data = collect_dataset(
            &run.policy,
            env.as_mut(),
            &sc.id,
            cfg.collect.greedy_episodes,
            cfg.collect.sampled_episodes,
            threshold,
            run_seed,
        )?;
        let returns: Vec<f64> = data.iter().map(Trajectory::total_return).collect();
        metrics.push(row("dataset", &sc.id, data.len(), mean_std(&returns), &start))?;
        trajectories.extend(data);
    }
    let dataset = DatasetFile::new(cfg.task, cfg.scenarios.clone(), trajectories)?;
    save_dataset(&out.join(DATASET_FILE), &dataset)?;
    metrics.write(&out.join("collect_metrics.csv"))?;
    Ok(CollectReport { dataset, metrics })
}

pub struct PretrainReport {
    pub model: DtModel,
    pub losses: Vec<f64>,
    pub metrics: MetricsTable,
}

/// Registers one adapter per dataset scenario and trains on all of them.
pub fn cmd_pretrain(cfg: &RunConfig, seed: u64, out: &Path) -> Result<PretrainReport> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let dataset = load_dataset(&cfg.dataset_path(out))?;
    if dataset.task != cfg.task {
        return Err(PipelineError::Config(format!(
            "dataset holds {:?} trajectories, config is for {:?}",
            dataset.task, cfg.task
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, INIT));
    let mut model = DtModel::new(cfg.model.clone(), &mut rng)?;
    let groups = dataset.by_scenario();
    let mut envs = Vec::new();
    for sc in &dataset.scenarios {
        let env = sc.spec.build()?;
        let data = groups.get(sc.id.as_str()).ok_or(DtError::EmptyDataset)?;
        for t in data {
            let got = t.states[0].len();
            if got != env.state_dim() {
                return Err(DtError::DimensionMismatch {
                    what: "state",
                    expected: env.state_dim(),
                    got,
                }
                .into());
            }
            if t.actions.iter().any(|a| !env.action_space().contains(a)) {
                return Err(PipelineError::Config(format!("scenario `{}` has actions outside its space", sc.id)));
            }
        }
        let entry = ScenarioEntry::from_data(&sc.id, env.state_dim(), env.action_space().clone(), env.prompt_features(), data)?;
        model.add_scenario(entry, &mut rng)?;
        envs.push((sc, env));
    }
    let losses = pretrain(&mut model, &dataset.trajectories, &cfg.pretrain, sub_seed(seed, TRAIN))?;
    save_checkpoint(&out.join(PRETRAINED_FILE), &model, seed)?;
    write_losses(&out.join("pretrain_loss.csv"), &losses)?;
    let mut metrics = MetricsTable::new();
    for (sc, mut env) in envs {
        let target = target_return(cfg.evaluate.target, model.scenario(&sc.id)?);
        let r = dt_returns(&model, &sc.id, env.as_mut(), eval_seed(seed), cfg.evaluate.episodes, target)?;
        metrics.push(row("pretrain_eval", &sc.id, losses.len(), mean_std(&r), &start))?;
    }
    metrics.write(&out.join("pretrain_metrics.csv"))?;
    Ok(PretrainReport { model, losses, metrics })
}

pub struct FinetuneReport {
    pub model: DtModel,
    pub few_shot: Vec<Trajectory>,
    /// Greedy returns of the transplanted model before any update.
    pub zero_shot: Vec<f64>,
    /// Greedy returns on the same seeds after fine-tuning.
    pub finetuned: Vec<f64>,
    pub losses: Vec<f64>,
    pub metrics: MetricsTable,
}

/// Collects few-shot episodes in the target scenario and adapts the
/// pre-trained model to it.
pub fn cmd_finetune(cfg: &RunConfig, seed: u64, out: &Path) -> Result<FinetuneReport> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let (mut model, _) = load_checkpoint(&cfg.pretrained_path(out))?;
    let target = &cfg.target;
    let id = target.id.as_str();
    let mut env = target.spec.build()?;
    let episodes = cfg.finetune.episodes;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TRANSPLANT));
    let few_shot = match &cfg.finetune.source {
        FewShotSource::Ppo { steps } => {
            let run = ppo::train(env.as_mut(), id, &cfg.ppo, *steps, sub_seed(seed, FEW_SHOT))?;
            if run.recent.len() < episodes {
                return Err(PipelineError::Config(format!(
                    "{steps} PPO steps completed {} episodes, {episodes} requested",
                    run.recent.len()
                )));
            }
            let skip = run.recent.len() - episodes;
            run.recent.into_iter().skip(skip).collect::<Vec<_>>()
        }
        FewShotSource::Dt => {
            let provisional = transplant_unseen(&mut model, env.as_ref(), id, &mut rng)?;
            let goal = target_return(cfg.evaluate.target, &provisional);
            (0..episodes as u64)
                .map(|i| {
                    let ep = rollout(&model, id, env.as_mut(), sub_seed(seed, FEW_SHOT).wrapping_add(i), goal)?;
                    Ok(Trajectory::new(id, ep.states, ep.actions, ep.rewards, false)?)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let entry = entry_for(env.as_ref(), id, &few_shot)?;
    if !model.scenarios.contains_key(id) {
        model.add_scenario_from_nearest(entry.clone(), &mut rng)?;
    }
    let n_eval = cfg.evaluate.episodes;
    let first = eval_seed(seed);
    let goal = target_return(cfg.evaluate.target, &entry);
    let zero_shot = dt_returns(&model, id, env.as_mut(), first, n_eval, goal)?;
    let losses = finetune(
        &mut model,
        entry,
        &few_shot,
        &cfg.finetune.freeze,
        &cfg.finetune.schedule,
        sub_seed(seed, TUNE),
    )?;
    let goal = target_return(cfg.evaluate.target, model.scenario(id)?);
    let finetuned = dt_returns(&model, id, env.as_mut(), first, n_eval, goal)?;
    save_checkpoint(&out.join(FINETUNED_FILE), &model, seed)?;
    write_losses(&out.join("finetune_loss.csv"), &losses)?;
    let mut metrics = MetricsTable::new();
    metrics.push(row("zero_shot", id, 0, mean_std(&zero_shot), &start))?;
    metrics.push(row("finetuned", id, losses.len(), mean_std(&finetuned), &start))?;
    metrics.write(&out.join("finetune_metrics.csv"))?;
    Ok(FinetuneReport {
        model,
        few_shot,
        zero_shot,
        finetuned,
        losses,
        metrics,
    })
}

/// Registers `id` from its nearest scenario, borrowing that scenario's
/// return statistics until data of its own exists.
fn transplant_unseen(model: &mut DtModel, env: &dyn Environment, id: &str, rng: &mut ChaCha8Rng) -> Result<ScenarioEntry> {
    let mut entry = ScenarioEntry {
        id: id.into(),
        state_dim: env.state_dim(),
        action_space: env.action_space().clone(),
        prompt_features: env.prompt_features(),
        return_scale: 1.0,
        max_return: 0.0,
        min_return: 0.0,
    };
    let donor = model
        .nearest_scenario(&entry)
        .ok_or_else(|| PipelineError::Config("checkpoint has no scenarios".into()))?;
    entry.return_scale = donor.return_scale;
    entry.max_return = donor.max_return;
    entry.min_return = donor.min_return;
    model.add_scenario_from_nearest(entry.clone(), rng)?;
    Ok(entry)
}

pub struct EvalReport {
    pub scenario_id: String,
    pub returns: Vec<f64>,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    kind: &'a str,
    scenario_id: &'a str,
    episode: usize,
    #[serde(rename = "return")]
    ret: f64,
    std: Option<f64>,
}

/// Per-episode returns of the configured policy plus a summary row.
pub fn cmd_evaluate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let spec = &cfg.evaluate;
    let id = spec.scenario.clone().unwrap_or_else(|| cfg.target.id.clone());
    let sc = cfg
        .scenario(&id)
        .ok_or_else(|| DtError::UnknownScenario(id.clone()))?;
    let mut env = sc.spec.build()?;
    let first = eval_seed(seed);
    let returns = match spec.policy {
        EvalPolicy::Random => (0..spec.episodes as u64)
            .map(|i| random_episode_return(env.as_mut(), first.wrapping_add(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        EvalPolicy::Pretrained | EvalPolicy::Finetuned => {
            let path = if spec.policy == EvalPolicy::Pretrained {
                cfg.pretrained_path(out)
            } else {
                cfg.finetuned_path(out)
            };
            let (model, _) = load_checkpoint(&path)?;
            let goal = target_return(spec.target, model.scenario(&id)?);
            dt_returns(&model, &id, env.as_mut(), first, spec.episodes, goal)?
        }
    };
    let mut w = csv_writer(&out.join("evaluate.csv"), &["kind", "scenario_id", "episode", "return", "std"])?;
    for (i, r) in returns.iter().enumerate() {
        w.serialize(EvalRow {
            kind: "episode",
            scenario_id: &id,
            episode: i,
            ret: *r,
            std: None,
        })?;
    }
    let (m, s) = mean_std(&returns);
    w.serialize(EvalRow {
        kind: "summary",
        scenario_id: &id,
        episode: returns.len(),
        ret: m,
        std: Some(s),
    })?;
    w.flush()?;
    Ok(EvalReport { scenario_id: id, returns })
}

pub struct CompareReport {
    /// Shared x-axis: environment steps charged to every arm.
    pub env_steps: Vec<usize>,
    pub dt_ft: Vec<CurvePoint>,
    pub ppo: Vec<CurvePoint>,
    pub random: Vec<CurvePoint>,
    pub speedup: Speedup,
    /// Environment steps spent on greedy evaluation of the fine-tuned model.
    pub dt_eval_steps: usize,
}

#[derive(Serialize)]
struct CompareRow<'a> {
    arm: &'a str,
    env_steps: usize,
    mean_return: f64,
    std: f64,
}

/// Learning curve of uniformly random actions with the same batching and
/// episode seeding as PPO.
pub fn random_curve(env: &mut dyn Environment, batch_steps: usize, batches: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = env.action_space().clone();
    let mut episode = 0u64;
    env.reset(seed);
    let mut acc = 0.0;
    let mut curve: Vec<CurvePoint> = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut finished = Vec::new();
        for _ in 0..batch_steps {
            let step = env.step(&space.sample(&mut rng))?;
            acc += step.reward;
            if step.done {
                finished.push(std::mem::take(&mut acc));
                episode += 1;
                env.reset(seed.wrapping_add(episode));
            }
        }
        let env_steps = (b + 1) * batch_steps;
        let (mean_return, std_return) = match (finished.is_empty(), curve.last()) {
            (false, _) => mean_std(&finished),
            (true, Some(p)) => (p.mean_return, p.std_return),
            (true, None) => (acc, 0.0),
        };
        curve.push(CurvePoint {
            env_steps,
            mean_return,
            std_return,
        });
    }
    Ok(curve)
}

/// Runs PPO from scratch on the target scenario; after every PPO batch the
/// fine-tuned arm continues adapting the pre-trained model on the latest
/// few-shot window of those episodes and is evaluated greedily.
pub fn cmd_compare(cfg: &RunConfig, seed: u64, out: &Path) -> Result<CompareReport> {
    fs::create_dir_all(out)?;
    let (pretrained, _) = load_checkpoint(&cfg.pretrained_path(out))?;
    let target: &Scenario = &cfg.target;
    let id = target.id.as_str();
    let spec = &cfg.compare;
    let mut env = target.spec.build()?;
    let mut eval_env = target.spec.build()?;
    let mut model = pretrained;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TRANSPLANT));
    let mut dt_ft: Vec<CurvePoint> = Vec::new();
    let mut dt_eval_steps = 0usize;
    let mut dt_seconds = 0.0;
    let started = Instant::now();
    let mut on_batch = |r: &BatchReport| -> std::result::Result<(), ppo::PpoError> {
        let t0 = Instant::now();
        let take = cfg.finetune.episodes.min(r.recent.len());
        if take == 0 {
            return Err(DtError::EmptyDataset.into());
        }
        let few: Vec<Trajectory> = r.recent.iter().skip(r.recent.len() - take).cloned().collect();
        let refs: Vec<&Trajectory> = few.iter().collect();
        let entry = ScenarioEntry::from_data(
            id,
            eval_env.state_dim(),
            eval_env.action_space().clone(),
            eval_env.prompt_features(),
            &refs,
        )?;
        let k = dt_ft.len();
        if k == 0 && !model.scenarios.contains_key(id) {
            model.add_scenario_from_nearest(entry.clone(), &mut rng)?;
        }
        let schedule = Schedule {
            steps: if k == 0 { spec.first_steps } else { spec.steps_per_point },
            ..cfg.finetune.schedule.clone()
        };
        finetune(&mut model, entry, &few, &cfg.finetune.freeze, &schedule, sub_seed(seed, TUNE).wrapping_add(k as u64))?;
        let goal = target_return(cfg.evaluate.target, model.scenario(id)?);
        let first = eval_seed(seed).wrapping_add((k * spec.eval_episodes) as u64);
        let mut returns = Vec::with_capacity(spec.eval_episodes);
        for i in 0..spec.eval_episodes as u64 {
            let ep = rollout(&model, id, eval_env.as_mut(), first.wrapping_add(i), goal)?;
            dt_eval_steps += ep.rewards.len();
            returns.push(ep.total_return());
        }
        let (mean_return, std_return) = mean_std(&returns);
        dt_ft.push(CurvePoint {
            env_steps: r.point.env_steps,
            mean_return,
            std_return,
        });
        dt_seconds += t0.elapsed().as_secs_f64();
        Ok(())
    };
    let run = ppo::train_with(env.as_mut(), id, &cfg.ppo, spec.budget, sub_seed(seed, PPO_RUN), &mut on_batch)?;
    let ppo_seconds = started.elapsed().as_secs_f64() - dt_seconds;
    let t_random = Instant::now();
    let mut random_env = target.spec.build()?;
    let random = random_curve(random_env.as_mut(), cfg.ppo.rollout_steps, run.curve.len(), sub_seed(seed, RANDOM_ARM))?;
    let random_seconds = t_random.elapsed().as_secs_f64();

    let env_steps: Vec<usize> = run.curve.iter().map(|p| p.env_steps).collect();
    let means = |c: &[CurvePoint]| c.iter().map(|p| p.mean_return).collect::<Vec<_>>();
    let stat = speedup(&env_steps, &means(&run.curve), &means(&dt_ft));

    let mut w = csv_writer(&out.join("compare.csv"), &["arm", "env_steps", "mean_return", "std"])?;
    for (arm, curve) in ARMS.iter().zip([&dt_ft, &run.curve, &random]) {
        for p in curve.iter() {
            w.serialize(CompareRow {
                arm,
                env_steps: p.env_steps,
                mean_return: p.mean_return,
                std: p.std_return,
            })?;
        }
    }
    w.flush()?;

    let fmt_steps = |s: Option<usize>| s.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv_writer(&out.join("compare_summary.csv"), &["statistic", "value"])?;
    for (k, v) in [
        ("ppo_plateau", stat.baseline_plateau.to_string()),
        ("dt_ft_plateau", stat.candidate_plateau.to_string()),
        ("random_plateau", super::stats::plateau(&means(&random)).to_string()),
        ("level", stat.level.to_string()),
        ("ppo_steps_to_level", fmt_steps(stat.baseline_steps)),
        ("dt_ft_steps_to_level", fmt_steps(stat.candidate_steps)),
        ("speedup", stat.ratio().map(|r| r.to_string()).unwrap_or_default()),
    ] {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;

    // dt_ft learns only from the PPO arm's episodes; its evaluation
    // rollouts are listed separately
    let budget = env_steps.last().copied().unwrap_or(0);
    let mut w = csv_writer(&out.join("compare_budget.csv"), &["arm", "train_env_steps", "eval_env_steps"])?;
    for (arm, eval) in ARMS.iter().zip([dt_eval_steps, 0, 0]) {
        w.serialize((arm, budget, eval))?;
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("compare.wall.csv"), &["arm", "wall_seconds"])?;
    for (arm, secs) in ARMS.iter().zip([dt_seconds, ppo_seconds, random_seconds]) {
        w.serialize((arm, secs))?;
    }
    w.flush()?;

    Ok(CompareReport {
        env_steps,
        dt_ft,
        ppo: run.curve,
        random,
        speedup: stat,
        dt_eval_steps,
    })
}
