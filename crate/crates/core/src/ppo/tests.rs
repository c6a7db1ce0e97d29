use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dt::{compute_returns_to_go, ActionSpace};
use crate::env::{EnvError, Environment, IrsScenario, ScenarioSpec, Step};

fn direct_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            (t..n)
                .map(|l| {
                    let delta = rewards[l] + gamma * values[l + 1] - values[l];
                    (gamma * lambda).powi((l - t) as i32) * delta
                })
                .sum()
        })
        .collect()
}

#[test]
fn gae_degenerate_cases() {
    let r = [1.0, -2.0, 0.5];
    let v = [0.3, 0.1, -0.4, 0.7];
    let no_done = [false; 3];
    let (a, ret) = gae(&r, &v, &no_done, 0.9, 0.0);
    for t in 0..3 {
        assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
        assert_eq!(ret[t], a[t] + v[t]);
    }
    let (a, _) = gae(&r, &v, &no_done, 0.0, 0.95);
    for t in 0..3 {
        assert_eq!(a[t], r[t] - v[t]);
    }
}

#[test]
fn gae_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..51).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (a, _) = gae(&r, &v, &[false; 50], 0.99, 0.95);
    for (x, y) in a.iter().zip(direct_gae(&r, &v, 0.99, 0.95)) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn gae_stops_at_terminal() {
    let r = [1.0, 1.0, 1.0, 1.0];
    let v = [0.0, 0.0, 5.0, 5.0, 5.0];
    let (a, _) = gae(&r, &v, &[false, true, false, false], 1.0, 1.0);
    // the first episode ends at step 1 and never sees V = 5
    assert_eq!(a[0], 2.0);
    assert_eq!(a[1], 1.0);
}

fn tiny_batch(policy: &PpoPolicy, n: usize, zero_adv: bool, rng: &mut ChaCha8Rng) -> Batch {
    let mut b = Batch::default();
    for _ in 0..n {
        let s: Vec<f64> = (0..policy.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = policy.act(&s, false, rng);
        b.states.push(s);
        b.actions.push(d.action.discrete);
        b.log_probs.push(d.log_prob);
        b.advantages.push(if zero_adv { 0.0 } else { rng.gen_range(-1.0..1.0) });
        b.returns.push(rng.gen_range(-1.0..1.0));
    }
    b
}

#[test]
fn first_minibatch_has_unit_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut policy = PpoPolicy::new(3, vec![2, 4], 8, &mut rng);
    let batch = tiny_batch(&policy, 16, false, &mut rng);
    let cfg = PpoConfig {
        minibatch: 16,
        ..PpoConfig::default()
    };
    let mut opt = AdamW::new(AdamWConfig::default());
    let stats = ppo_update(&mut policy, &mut opt, &batch, &cfg, &mut rng).unwrap();
    assert_eq!(stats.first_clip_fraction, 0.0);
    assert!(stats.approx_kl >= 0.0);
}

#[test]
fn zero_advantage_actor_gradient_is_entropy_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = PpoPolicy::new(3, vec![3], 8, &mut rng);
    let batch = tiny_batch(&policy, 10, true, &mut rng);
    let idx: Vec<usize> = (0..10).collect();
    let grads_with = |coef: f64| {
        let cfg = PpoConfig {
            entropy_coef: coef,
            ..PpoConfig::default()
        };
        let mut g = Graph::new();
        let mut b = Binder::trainable(&policy.params);
        let out = minibatch_loss(&mut g, &mut b, &policy, &batch, &idx, &cfg).unwrap();
        let mut gr = g.backward(out.loss).unwrap();
        b.collect(&mut gr)
    };
    let none = grads_with(0.0);
    for (name, t) in &none {
        if name.starts_with("actor") {
            assert!(t.data().iter().all(|x| *x == 0.0), "{name}");
        }
    }
    let some = grads_with(0.01);
    assert!(some["actor.w3"].data().iter().any(|x| *x != 0.0));
}

#[test]
fn surrogate_is_unclipped_inside_trust_region() {
    let mut g = Graph::new();
    let ratios = [0.85, 1.0, 1.1, 1.19];
    let adv = [1.5, -2.0, 0.3, -0.7];
    let r = g.constant(Tensor::matrix(4, 1, ratios.to_vec()).unwrap());
    let s = g.clipped_surrogate(r, &adv, 0.2).unwrap();
    for (i, v) in g.value(s).data().iter().enumerate() {
        assert_eq!(*v, ratios[i] * adv[i]);
    }
}

proptest! {
    #[test]
    fn part_distributions_are_valid(s in proptest::collection::vec(-3f64..3.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PpoPolicy::new(4, vec![2, 5, 3], 16, &mut rng);
        for lp in policy.log_probs(&s) {
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(lp.iter().all(|v| *v <= 0.0));
        }
        prop_assert!(policy.value(&s).is_finite());
    }
}

/// Walk right along a corridor; reaching the end pays 1 and restarts at 0.
struct Corridor {
    len: usize,
    pos: usize,
    t: usize,
    horizon: usize,
    space: ActionSpace,
}

impl Corridor {
    fn new(len: usize, horizon: usize) -> Self {
        Self {
            len,
            pos: 0,
            t: horizon,
            horizon,
            space: ActionSpace::discrete(vec![2]),
        }
    }

    fn obs(&self) -> Vec<f64> {
        (0..self.len).map(|i| if i == self.pos { 1.0 } else { 0.0 }).collect()
    }

    fn optimal_return(&self) -> f64 {
        (self.horizon / self.len) as f64
    }
}

impl Environment for Corridor {
    fn state_dim(&self) -> usize {
        self.len
    }
    fn action_space(&self) -> &ActionSpace {
        &self.space
    }
    fn episode_len(&self) -> usize {
        self.horizon
    }
    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = 0;
        self.t = 0;
        self.obs()
    }
    fn step(&mut self, a: &HybridAction) -> std::result::Result<Step, EnvError> {
        if self.t >= self.horizon {
            return Err(EnvError::EpisodeDone);
        }
        self.t += 1;
        let mut reward = 0.0;
        if a.discrete[0] == 1 {
            self.pos += 1;
            if self.pos == self.len {
                reward = 1.0;
                self.pos = 0;
            }
        } else {
            self.pos = self.pos.saturating_sub(1);
        }
        Ok(Step {
            state: self.obs(),
            reward,
            done: self.t == self.horizon,
        })
    }
    fn prompt_features(&self) -> Vec<f64> {
        vec![0.0; 7]
    }
}

#[test]
fn corridor_reaches_near_optimal_return() {
    let mut env = Corridor::new(5, 500);
    let cfg = PpoConfig {
        rollout_steps: 1000,
        minibatch: 250,
        lr: 3e-3,
        ..PpoConfig::default()
    };
    let run = train(&mut env, "corridor", &cfg, 50_000, 7).unwrap();
    assert_eq!(run.curve.len(), 50);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = run_episode(&run.policy, &mut env, "corridor", true, 0.0, 0, &mut rng).unwrap();
    assert!(
        t.total_return() >= 0.9 * env.optimal_return(),
        "greedy return {} of optimum {}",
        t.total_return(),
        env.optimal_return()
    );
}

fn small_cfg() -> PpoConfig {
    PpoConfig {
        rollout_steps: 200,
        minibatch: 100,
        epochs: 2,
        hidden: 16,
        ..PpoConfig::default()
    }
}

#[test]
fn training_is_deterministic_with_curve_per_batch() {
    let spec = ScenarioSpec::Irs(IrsScenario {
        episode_len: 50,
        ..IrsScenario::with_elements(4)
    });
    let cfg = small_cfg();
    let run = |seed| {
        let mut env = spec.build().unwrap();
        train(env.as_mut(), "irs", &cfg, 1000, seed).unwrap()
    };
    let (a, b) = (run(5), run(5));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.curve.len(), 1000 / cfg.rollout_steps);
    assert_eq!(a.curve[0].env_steps, 200);
    let mut env = spec.build().unwrap();
    assert!(train(env.as_mut(), "irs", &cfg, 199, 0).is_err());
}

#[test]
fn collected_trajectories_carry_flags_and_rtg() {
    let spec = ScenarioSpec::Irs(IrsScenario {
        episode_len: 20,
        ..IrsScenario::with_elements(4)
    });
    let mut env = spec.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = PpoPolicy::for_env(env.as_ref(), 8, &mut rng).unwrap();
    let all = collect_dataset(&policy, env.as_mut(), "irs", 3, 5, f64::NEG_INFINITY, 1).unwrap();
    assert_eq!(all.len(), 8);
    assert!(all.iter().all(|t| t.expert));
    for t in &all {
        assert_eq!(t.returns_to_go, compute_returns_to_go(&t.rewards).unwrap());
    }
    let thr = percentile(&all.iter().map(|t| t.total_return()).collect::<Vec<_>>(), 50.0);
    let again = collect_dataset(&policy, env.as_mut(), "irs", 3, 5, thr, 1).unwrap();
    let (ex, non): (Vec<_>, Vec<_>) = again.iter().partition(|t| t.expert);
    let mean = |v: &[&Trajectory]| v.iter().map(|t| t.total_return()).sum::<f64>() / v.len() as f64;
    assert!(!ex.is_empty() && !non.is_empty());
    assert!(mean(&ex) >= mean(&non));
}

#[test]
fn percentile_oracle() {
    let xs = [5.0, 1.0, 3.0, 2.0, 4.0];
    assert_eq!(percentile(&xs, 0.0), 1.0);
    assert_eq!(percentile(&xs, 100.0), 5.0);
    assert_eq!(percentile(&xs, 50.0), 3.0);
    assert_eq!(percentile(&xs, 80.0), 4.2);
}

#[test]
fn config_validation() {
    assert!(PpoConfig { clip: 1.0, ..PpoConfig::default() }.validate().is_err());
    assert!(PpoConfig { gamma: 1.5, ..PpoConfig::default() }.validate().is_err());
    assert!(PpoConfig::default().validate().is_ok());
}
