//! PPO from scratch on a small IRS scenario.

use dtwireless::env::{IrsEnv, IrsScenario};
use dtwireless::ppo::{train, PpoConfig};

fn main() {
    let mut env = IrsEnv::new(IrsScenario {
        episode_len: 50,
        ..IrsScenario::with_elements(8)
    })
    .unwrap();
    let cfg = PpoConfig {
        gamma: 0.5,
        rollout_steps: 1024,
        minibatch: 256,
        ..PpoConfig::default()
    };
    let run = train(&mut env, "irs8", &cfg, 40 * 1024, 7).unwrap();
    for p in run.curve.iter().step_by(4) {
        println!("{:>6} steps  return {:>6.1} +- {:.1}", p.env_steps, p.mean_return, p.std_return);
    }
    println!("kept {} recent episodes", run.recent.len());
}
