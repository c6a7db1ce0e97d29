//! IRS phase-shift environment: random phases against the exact
//! rate-maximizing configuration.

use dtwireless::env::{random_episode_return, Environment, IrsEnv, IrsScenario};

fn main() {
    for n in [4, 8, 16, 32] {
        let mut env = IrsEnv::new(IrsScenario::with_elements(n)).unwrap();
        let episodes = 10;
        let mut random = 0.0;
        let mut best = 0.0;
        for seed in 0..episodes {
            random += random_episode_return(&mut env, seed).unwrap();
            env.reset(seed);
            loop {
                let a = env.best_action().unwrap();
                let step = env.step(&a).unwrap();
                best += step.reward;
                if step.done {
                    break;
                }
            }
        }
        let e = episodes as f64;
        println!(
            "N={n:>2}: state_dim {:>3}, random {:>6.1}, best {:>6.1} (sum of rates over {} slots)",
            env.state_dim(),
            random / e,
            best / e,
            env.episode_len()
        );
    }
}
