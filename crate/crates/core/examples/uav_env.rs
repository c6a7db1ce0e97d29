//! UAV edge-computing environment: a random policy against a greedy one
//! that flies each UAV toward its nearest user with pending work.

use dtwireless::dt::HybridAction;
use dtwireless::env::{Environment, UavEnv, UavScenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn greedy(env: &UavEnv) -> HybridAction {
    let mut parts = Vec::new();
    for &p in env.uav_positions() {
        let user = env.nearest_pending_user(p).unwrap_or(0);
        let u = env.users()[user].position;
        let (dx, dy) = (u[0] - p[0], u[1] - p[1]);
        // directions: up, down, right, left, hover
        let dir = if dx.abs().max(dy.abs()) < 2.5 {
            4
        } else if dx.abs() > dy.abs() {
            if dx > 0.0 { 2 } else { 3 }
        } else if dy > 0.0 {
            0
        } else {
            1
        };
        parts.extend([dir, user]);
    }
    HybridAction::discrete(parts)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [2, 3] {
        let mut env = UavEnv::new(UavScenario::with_uavs(k)).unwrap();
        let space = env.action_space().clone();
        let (mut random, mut guided) = (0.0, 0.0);
        for seed in 0..20 {
            env.reset(seed);
            let initial = env.initial_bits();
            let mut served = 0;
            loop {
                let s = env.step(&space.sample(&mut rng)).unwrap();
                served += env.last_served_bits();
                random += s.reward;
                if s.done {
                    break;
                }
            }
            assert_eq!(initial, served + env.remaining_bits().iter().sum::<u64>());
            env.reset(seed);
            loop {
                let s = env.step(&greedy(&env)).unwrap();
                guided += s.reward;
                if s.done {
                    break;
                }
            }
        }
        println!("K={k}: random {:.1} Mb, nearest-user {:.1} Mb per episode", random / 20.0, guided / 20.0);
    }
}
