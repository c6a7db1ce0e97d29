//! Offline decision-transformer training on a mix of random and
//! rate-maximizing IRS episodes, then rollouts at low and high target returns.

use dtwireless::dt::{evaluate, pretrain, DtConfig, DtModel, ScenarioEntry, Schedule, Trajectory};
use dtwireless::env::{Environment, IrsEnv, IrsScenario};
use dtwireless::transformer::TransformerConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn episode(env: &mut IrsEnv, seed: u64, best: bool, rng: &mut ChaCha8Rng) -> Trajectory {
    let space = env.action_space().clone();
    let mut state = env.reset(seed);
    let (mut s, mut a, mut r) = (vec![], vec![], vec![]);
    loop {
        let act = if best { env.best_action().unwrap() } else { space.sample(rng) };
        let step = env.step(&act).unwrap();
        s.push(std::mem::replace(&mut state, step.state));
        a.push(act);
        r.push(step.reward);
        if step.done {
            return Trajectory::new("irs8", s, a, r, best).unwrap();
        }
    }
}

fn main() {
    let mut env = IrsEnv::new(IrsScenario {
        episode_len: 30,
        ..IrsScenario::with_elements(8)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Trajectory> = (0..200).map(|i| episode(&mut env, i, i % 2 == 0, &mut rng)).collect();

    let cfg = DtConfig {
        transformer: TransformerConfig {
            model_dim: 32,
            ffn_dim: 64,
            dropout_rate: 0.0,
            max_sequence_len: 10,
            ..TransformerConfig::default()
        },
        context_len: 3,
        max_timestep: 30,
        ..DtConfig::default()
    };
    let mut model = DtModel::new(cfg, &mut rng).unwrap();
    let refs: Vec<&Trajectory> = data.iter().collect();
    let entry = ScenarioEntry::from_data("irs8", env.state_dim(), env.action_space().clone(), env.prompt_features(), &refs).unwrap();
    let (lo, hi) = (entry.min_return, entry.max_return);
    model.add_scenario(entry, &mut rng).unwrap();

    let losses = pretrain(&mut model, &data, &Schedule::with_steps(600).lr(3e-4), 1).unwrap();
    println!("loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    for target in [lo, hi] {
        let r = evaluate(&model, "irs8", &mut env, 1000, 20, target).unwrap();
        println!("target {target:>6.1}: mean return {r:.1}");
    }
}
