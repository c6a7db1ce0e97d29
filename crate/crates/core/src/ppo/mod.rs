//! Proximal policy optimization over factorized categorical action spaces.

use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dt::{DtError, HybridAction, Trajectory};
use crate::env::{EnvError, Environment};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Binder, Graph, NumericsError, ParamSet, Tensor, Var};

#[cfg(test)]
mod tests;

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error("continuous action parts are not supported")]
    ContinuousAction,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dt(#[from] DtError),
}

type Result<T> = std::result::Result<T, PpoError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Environment steps collected per update.
    pub rollout_steps: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub hidden: usize,
    pub max_grad_norm: f64,
    /// Completed training episodes kept for dataset building.
    pub keep_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 4,
            rollout_steps: 2048,
            minibatch: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            hidden: 64,
            max_grad_norm: 0.5,
            keep_episodes: 200,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.rollout_steps == 0 || self.minibatch == 0 || self.hidden == 0 {
            return bad("epochs, rollout_steps, minibatch and hidden must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Generalized advantage estimates and value targets.
///
/// `values` holds `V(s_0..s_T)` plus the bootstrap value of the state after
/// the last step; `dones[t]` marks a terminal transition at step `t`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(values.len(), rewards.len() + 1, "values need a bootstrap entry");
    assert_eq!(dones.len(), rewards.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor, out: &mut Vec<f64>) {
    let cols = w.cols();
    out.clear();
    out.extend_from_slice(b.data());
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
    }
    debug_assert_eq!(out.len(), cols);
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Actor and critic perceptrons with two tanh hidden layers each.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoPolicy {
    pub state_dim: usize,
    pub cards: Vec<usize>,
    pub params: ParamSet,
}

/// One sampled or greedy decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: HybridAction,
    pub log_prob: f64,
    pub value: f64,
}

impl PpoPolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, cards: Vec<usize>, hidden: usize, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let total: usize = cards.iter().sum();
        for (net, out, out_std) in [("actor", total, 0.01), ("critic", 1, 1.0)] {
            let s1 = (2.0 / state_dim as f64).sqrt();
            let s2 = (2.0 / hidden as f64).sqrt();
            p.insert(format!("{net}.w1"), Tensor::randn(&[state_dim, hidden], s1 / 2f64.sqrt(), rng));
            p.insert(format!("{net}.b1"), Tensor::zeros(&[hidden]));
            p.insert(format!("{net}.w2"), Tensor::randn(&[hidden, hidden], s2 / 2f64.sqrt(), rng));
            p.insert(format!("{net}.b2"), Tensor::zeros(&[hidden]));
            p.insert(format!("{net}.w3"), Tensor::randn(&[hidden, out], out_std / (hidden as f64).sqrt(), rng));
            p.insert(format!("{net}.b3"), Tensor::zeros(&[out]));
        }
        Self { state_dim, cards, params: p }
    }

    /// Policy for `env`; errors on continuous action parts.
    pub fn for_env<R: Rng + ?Sized>(env: &dyn Environment, hidden: usize, rng: &mut R) -> Result<Self> {
        let space = env.action_space();
        if !space.continuous.is_empty() {
            return Err(PpoError::ContinuousAction);
        }
        Ok(Self::new(env.state_dim(), space.discrete.clone(), hidden, rng))
    }

    fn mlp(&self, net: &str, s: &[f64]) -> Vec<f64> {
        let p = |n: &str| self.params.get(&format!("{net}.{n}")).expect("policy parameter");
        let mut h1 = Vec::new();
        dense(s, p("w1"), p("b1"), &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = Vec::new();
        dense(&h1, p("w2"), p("b2"), &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = Vec::new();
        dense(&h2, p("w3"), p("b3"), &mut out);
        out
    }

    /// Per-part log-probabilities at `state`.
    pub fn log_probs(&self, state: &[f64]) -> Vec<Vec<f64>> {
        let logits = self.mlp("actor", state);
        let mut off = 0;
        self.cards
            .iter()
            .map(|&c| {
                let lp = log_softmax(&logits[off..off + c]);
                off += c;
                lp
            })
            .collect()
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        self.mlp("critic", state)[0]
    }

    /// Samples each part, or takes its most likely index when `greedy`
    /// (ties to the lowest index).
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], greedy: bool, rng: &mut R) -> Decision {
        let parts = self.log_probs(state);
        let mut discrete = Vec::with_capacity(parts.len());
        let mut log_prob = 0.0;
        for lp in &parts {
            let k = if greedy {
                lp.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            } else {
                let w: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                WeightedIndex::new(&w).expect("valid distribution").sample(rng)
            };
            log_prob += lp[k];
            discrete.push(k);
        }
        Decision {
            action: HybridAction::discrete(discrete),
            log_prob,
            value: self.value(state),
        }
    }
}

fn graph_mlp(g: &mut Graph, b: &mut Binder, net: &str, x: Var) -> std::result::Result<Var, NumericsError> {
    let mut h = x;
    for (i, act) in [(1, true), (2, true), (3, false)] {
        let w = b.var(g, &format!("{net}.w{i}"))?;
        let bias = b.var(g, &format!("{net}.b{i}"))?;
        h = g.matmul(h, w)?;
        h = g.add_row(h, bias)?;
        if act {
            h = g.tanh(h)?;
        }
    }
    Ok(h)
}

/// Samples stored for one update.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Diagnostics of one update, averaged over minibatches of the last epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Clip fraction of the first minibatch of the first epoch.
    pub first_clip_fraction: f64,
}

struct MinibatchOut {
    loss: Var,
    policy: f64,
    value: f64,
    entropy: f64,
    clip_fraction: f64,
    kl: f64,
}

/// Clipped-surrogate loss of one minibatch; advantages are used as given.
fn minibatch_loss(
    g: &mut Graph,
    b: &mut Binder,
    policy: &PpoPolicy,
    batch: &Batch,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<MinibatchOut> {
    let n = idx.len();
    let sd = policy.state_dim;
    let data: Vec<f64> = idx.iter().flat_map(|&i| batch.states[i].iter().copied()).collect();
    let x = g.constant(Tensor::matrix(n, sd, data)?);
    let logits = graph_mlp(g, b, "actor", x)?;
    let mut logp: Option<Var> = None;
    let mut ent: Option<Var> = None;
    let mut off = 0;
    for (p, &c) in policy.cards.iter().enumerate() {
        let part = g.slice_cols(logits, off, c)?;
        off += c;
        let lp = g.log_softmax(part)?;
        let chosen: Vec<usize> = idx.iter().map(|&i| batch.actions[i][p]).collect();
        let pick = g.pick(lp, &chosen)?;
        logp = Some(match logp {
            Some(acc) => g.add(acc, pick)?,
            None => pick,
        });
        let pr = g.softmax(part)?;
        let plp = g.mul(pr, lp)?;
        let s = g.sum(plp)?;
        ent = Some(match ent {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let logp = logp.expect("at least one action part");
    let old: Vec<f64> = idx.iter().map(|&i| batch.log_probs[i]).collect();
    let old_v = g.constant(Tensor::matrix(n, 1, old.clone())?);
    let diff = g.sub(logp, old_v)?;
    let ratio = g.exp(diff)?;
    let adv: Vec<f64> = idx.iter().map(|&i| batch.advantages[i]).collect();
    let surr = g.clipped_surrogate(ratio, &adv, cfg.clip)?;
    let surr = g.mean(surr)?;
    let policy_loss = g.scale(surr, -1.0)?;
    // the summed p*log p is minus the entropy
    let neg_ent = ent.expect("at least one action part");
    let neg_ent = g.scale(neg_ent, 1.0 / n as f64)?;
    let values = graph_mlp(g, b, "critic", x)?;
    let targets = Tensor::matrix(n, 1, idx.iter().map(|&i| batch.returns[i]).collect())?;
    let vl = g.weighted_sq_err(values, &targets, &vec![1.0 / n as f64; n])?;
    let ent_term = g.scale(neg_ent, cfg.entropy_coef)?;
    let v_term = g.scale(vl, cfg.value_coef)?;
    let loss = g.add(policy_loss, ent_term)?;
    let loss = g.add(loss, v_term)?;
    if !g.value(loss).is_finite() {
        return Err(PpoError::NonFinite("loss"));
    }
    let rv = g.value(ratio).data();
    let clipped = rv.iter().filter(|r| (**r - 1.0).abs() > cfg.clip).count();
    let kl = rv.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n as f64;
    Ok(MinibatchOut {
        loss,
        policy: g.value(policy_loss).item(),
        value: g.value(vl).item(),
        entropy: -g.value(neg_ent).item(),
        clip_fraction: clipped as f64 / n as f64,
        kl,
    })
}

/// Normalizes advantages to zero mean and unit variance in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Runs `epochs` passes of shuffled minibatch updates over `batch`.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PpoPolicy,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(PpoError::Config("empty batch".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut acc = UpdateStats::default();
        let mut count = 0.0;
        for (m, idx) in order.chunks(cfg.minibatch).enumerate() {
            let mut g = Graph::new();
            let snapshot = policy.params.clone();
            let mut b = Binder::trainable(&snapshot);
            let out = minibatch_loss(&mut g, &mut b, policy, batch, idx, cfg)?;
            if epoch == 0 && m == 0 {
                stats.first_clip_fraction = out.clip_fraction;
            }
            let mut grads = g.backward(out.loss)?;
            let mut named = b.collect(&mut grads);
            clip_grad_norm(&mut named, cfg.max_grad_norm);
            opt.step(&mut policy.params, &named)?;
            acc.policy_loss += out.policy;
            acc.value_loss += out.value;
            acc.entropy += out.entropy;
            acc.clip_fraction += out.clip_fraction;
            acc.approx_kl += out.kl;
            count += 1.0;
        }
        if epoch + 1 == cfg.epochs {
            stats.policy_loss = acc.policy_loss / count;
            stats.value_loss = acc.value_loss / count;
            stats.entropy = acc.entropy / count;
            stats.clip_fraction = acc.clip_fraction / count;
            stats.approx_kl = acc.approx_kl / count;
        }
    }
    Ok(stats)
}

/// One learning-curve sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// State passed to the per-batch callback of [`train_with`].
pub struct BatchReport<'a> {
    pub policy: &'a PpoPolicy,
    pub point: &'a CurvePoint,
    pub stats: &'a UpdateStats,
    /// Most recent completed training episodes, oldest first.
    pub recent: &'a VecDeque<Trajectory>,
}

/// Result of a PPO training run.
#[derive(Clone, Debug)]
pub struct PpoRun {
    pub policy: PpoPolicy,
    pub curve: Vec<CurvePoint>,
    pub stats: Vec<UpdateStats>,
    pub recent: VecDeque<Trajectory>,
}

pub fn train(env: &mut dyn Environment, scenario_id: &str, cfg: &PpoConfig, budget: usize, seed: u64) -> Result<PpoRun> {
    train_with(env, scenario_id, cfg, budget, seed, &mut |_| Ok(()))
}

/// Trains for `budget / rollout_steps` updates, one curve point per update.
///
/// Each point averages the returns of episodes completed during its batch;
/// a batch that completes none repeats the previous point.
pub fn train_with(
    env: &mut dyn Environment,
    scenario_id: &str,
    cfg: &PpoConfig,
    budget: usize,
    seed: u64,
    on_batch: &mut dyn FnMut(&BatchReport) -> Result<()>,
) -> Result<PpoRun> {
    cfg.validate()?;
    let updates = budget / cfg.rollout_steps;
    if updates == 0 {
        return Err(PpoError::Config(format!(
            "budget {budget} is smaller than one rollout of {} steps",
            cfg.rollout_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = PpoPolicy::for_env(env, cfg.hidden, &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        eps: 1e-5,
        ..AdamWConfig::default()
    });
    let mut episode = 0u64;
    let mut state = env.reset(seed.wrapping_add(episode));
    let mut current = EpisodeLog::default();
    let mut recent: VecDeque<Trajectory> = VecDeque::new();
    let mut curve = Vec::with_capacity(updates);
    let mut all_stats = Vec::with_capacity(updates);
    for u in 0..updates {
        let mut batch = Batch::default();
        let mut rewards = Vec::with_capacity(cfg.rollout_steps);
        let mut values = Vec::with_capacity(cfg.rollout_steps + 1);
        let mut dones = Vec::with_capacity(cfg.rollout_steps);
        let mut finished = Vec::new();
        for _ in 0..cfg.rollout_steps {
            let d = policy.act(&state, false, &mut rng);
            let step = env.step(&d.action)?;
            batch.states.push(state.clone());
            batch.actions.push(d.action.discrete.clone());
            batch.log_probs.push(d.log_prob);
            values.push(d.value);
            rewards.push(step.reward);
            dones.push(step.done);
            current.push(std::mem::replace(&mut state, step.state), d.action, step.reward);
            if step.done {
                let t = std::mem::take(&mut current).finish(scenario_id)?;
                finished.push(t.total_return());
                recent.push_back(t);
                if recent.len() > cfg.keep_episodes {
                    recent.pop_front();
                }
                episode += 1;
                state = env.reset(seed.wrapping_add(episode));
            }
        }
        values.push(policy.value(&state));
        let (mut adv, ret) = gae(&rewards, &values, &dones, cfg.gamma, cfg.lambda);
        normalize_advantages(&mut adv);
        batch.advantages = adv;
        batch.returns = ret;
        let stats = ppo_update(&mut policy, &mut opt, &batch, cfg, &mut rng)?;
        let point = if finished.is_empty() {
            match curve.last() {
                Some(p) => CurvePoint {
                    env_steps: (u + 1) * cfg.rollout_steps,
                    ..Clone::clone(p)
                },
                None => CurvePoint {
                    env_steps: (u + 1) * cfg.rollout_steps,
                    mean_return: current.rewards.iter().sum(),
                    std_return: 0.0,
                },
            }
        } else {
            let (m, s) = mean_std(&finished);
            CurvePoint {
                env_steps: (u + 1) * cfg.rollout_steps,
                mean_return: m,
                std_return: s,
            }
        };
        on_batch(&BatchReport {
            policy: &policy,
            point: &point,
            stats: &stats,
            recent: &recent,
        })?;
        curve.push(point);
        all_stats.push(stats);
    }
    Ok(PpoRun {
        policy,
        curve,
        stats: all_stats,
        recent,
    })
}

#[derive(Default)]
struct EpisodeLog {
    states: Vec<Vec<f64>>,
    actions: Vec<HybridAction>,
    rewards: Vec<f64>,
}

impl EpisodeLog {
    fn push(&mut self, s: Vec<f64>, a: HybridAction, r: f64) {
        self.states.push(s);
        self.actions.push(a);
        self.rewards.push(r);
    }

    fn finish(self, id: &str) -> Result<Trajectory> {
        Ok(Trajectory::new(id, self.states, self.actions, self.rewards, false)?)
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of `xs`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Default expert threshold: the 80th percentile of the final 200
/// training-episode returns.
pub fn expert_threshold(run: &PpoRun) -> f64 {
    let returns: Vec<f64> = run.recent.iter().rev().take(200).map(|t| t.total_return()).collect();
    percentile(&returns, 80.0)
}

/// Runs one episode with `policy`, flagging it expert when its return
/// reaches `threshold`.
pub fn run_episode<R: Rng + ?Sized>(
    policy: &PpoPolicy,
    env: &mut dyn Environment,
    scenario_id: &str,
    greedy: bool,
    threshold: f64,
    seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = env.reset(seed);
    let mut log = EpisodeLog::default();
    loop {
        let d = policy.act(&state, greedy, rng);
        let step = env.step(&d.action)?;
        log.push(std::mem::replace(&mut state, step.state), d.action, step.reward);
        if step.done {
            let mut t = log.finish(scenario_id)?;
            t.expert = t.total_return() >= threshold;
            return Ok(t);
        }
    }
}

/// Rolls out `greedy` argmax episodes followed by `sampled` episodes and
/// flags those with return at least `threshold` as expert.
pub fn collect_dataset(
    policy: &PpoPolicy,
    env: &mut dyn Environment,
    scenario_id: &str,
    greedy: usize,
    sampled: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc011_ec7);
    (0..greedy + sampled)
        .map(|i| run_episode(policy, env, scenario_id, i < greedy, threshold, seed.wrapping_add(i as u64), &mut rng))
        .collect()
}
