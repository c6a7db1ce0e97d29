use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn all_phase_configs(n: usize, levels: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..levels).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

fn run_episode(env: &mut dyn Environment, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut states = vec![env.reset(seed)];
    let mut rewards = Vec::new();
    let space = env.action_space().clone();
    loop {
        let s = env.step(&space.sample(&mut rng)).unwrap();
        rewards.push(s.reward);
        states.push(s.state);
        if s.done {
            return (states, rewards);
        }
    }
}

#[test]
fn irs_reset_is_seeded() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(8)).unwrap();
    let a = env.reset(3);
    let b = env.reset(3);
    let c = env.reset(4);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 2 * 8 + 3);
    assert_eq!(a[0], 0.0, "previous rate starts at zero");
}

#[test]
fn irs_infinite_k_factor_is_line_of_sight() {
    let sc = IrsScenario {
        rician_k: f64::INFINITY,
        ..IrsScenario::with_elements(4)
    };
    let mut env = IrsEnv::new(sc.clone()).unwrap();
    env.reset(9);
    let ch = env.channel().unwrap().clone();
    // independent LoS oracle: free-space phase and d^-alpha amplitude per path
    let d = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let los = |dist: f64, alpha: f64| {
        let amp = (sc.reference_gain / dist.powf(alpha)).sqrt();
        Complex64::new(amp * (2.0 * PI * dist / sc.wavelength).cos(), -amp * (2.0 * PI * dist / sc.wavelength).sin())
    };
    assert!((ch.direct - los(d(sc.bs_position, sc.user_position), sc.direct_exponent)).norm() < 1e-18);
    for n in 0..4 {
        let off = (n as f64 - 1.5) * sc.wavelength / 2.0;
        let e = [sc.irs_position[0] + off, sc.irs_position[1], sc.irs_position[2]];
        assert!((ch.bs_irs[n] - los(d(sc.bs_position, e), sc.bs_irs_exponent)).norm() < 1e-18);
        assert!((ch.irs_user[n] - los(d(e, sc.user_position), sc.irs_user_exponent)).norm() < 1e-18);
    }
    // large finite K approaches the same channel
    let mut near = IrsEnv::new(IrsScenario { rician_k: 1e12, ..sc }).unwrap();
    near.reset(9);
    let nc = near.channel().unwrap();
    assert!((nc.direct - ch.direct).norm() <= 1e-5 * ch.direct.norm());
}

#[test]
fn rate_formula_cases() {
    let ch = Channel {
        direct: Complex64::new(0.0, 0.0),
        bs_irs: vec![Complex64::from_polar(1.0, 0.4)],
        irs_user: vec![Complex64::from_polar(1.0, -1.3)],
    };
    assert_eq!(compute_rate(&ch, 0.0, &[0.7], 1.0), 0.0);
    assert!((compute_rate(&ch, 1.0, &[2.1], 1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn aligned_array_gain_is_n_squared() {
    for n in [2usize, 4, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let f: Vec<Complex64> = (0..n).map(|_| Complex64::from_polar(1.0, rng.gen_range(-PI..PI))).collect();
        let g: Vec<Complex64> = (0..n).map(|_| Complex64::from_polar(1.0, rng.gen_range(-PI..PI))).collect();
        let phases: Vec<f64> = f.iter().zip(&g).map(|(a, b)| -(a * b).arg()).collect();
        let ch = Channel {
            direct: Complex64::new(0.0, 0.0),
            bs_irs: f,
            irs_user: g,
        };
        assert!((ch.combined(&phases).norm_sqr() - (n * n) as f64).abs() < 1e-9);
    }
}

#[test]
fn best_action_matches_exhaustive_search() {
    let sc = IrsScenario::with_elements(4);
    let mut env = IrsEnv::new(sc.clone()).unwrap();
    let configs = all_phase_configs(4, 4);
    for seed in 0..50 {
        env.reset(seed);
        let ch = env.channel().unwrap().clone();
        let best = env.best_action().unwrap();
        let got = env.rate_of(&ch, &best).unwrap();
        let oracle = configs
            .iter()
            .flat_map(|ph| {
                (0..3).map(move |p| {
                    let mut parts = vec![p];
                    parts.extend(ph);
                    HybridAction::discrete(parts)
                })
            })
            .map(|a| env.rate_of(&ch, &a).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(got, oracle, "seed {seed}");
    }
}

#[test]
fn irs_episode_length_and_reward_replay() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(8)).unwrap();
    env.reset(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let space = env.action_space().clone();
    let mut steps = 0;
    loop {
        let ch = env.channel().unwrap().clone();
        let a = space.sample(&mut rng);
        let (p, phases) = env.decode(&a).unwrap();
        let s = env.step(&a).unwrap();
        steps += 1;
        assert_eq!(s.reward, compute_rate(&ch, p, &phases, env.scenario().noise_power));
        assert_eq!(s.state[0], s.reward / 10.0);
        if s.done {
            break;
        }
    }
    assert_eq!(steps, 100);
    assert_eq!(env.step(&space.sample(&mut rng)), Err(EnvError::EpisodeDone));
}

#[test]
fn aligned_phases_beat_random_draws() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(8)).unwrap();
    env.reset(21);
    let ch = env.channel().unwrap().clone();
    let best = env.rate_of(&ch, &env.best_action().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let space = env.action_space().clone();
    for _ in 0..100 {
        assert!(best >= env.rate_of(&ch, &space.sample(&mut rng)).unwrap());
    }
}

#[test]
fn irs_snr_budget_spans_useful_range() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(8)).unwrap();
    let (mut rand_sum, mut best_sum) = (0.0, 0.0);
    for seed in 0..20 {
        rand_sum += random_episode_return(&mut env, seed).unwrap();
        env.reset(seed);
        let mut total = 0.0;
        loop {
            let a = env.best_action().unwrap();
            let s = env.step(&a).unwrap();
            total += s.reward;
            if s.done {
                break;
            }
        }
        best_sum += total;
    }
    let (r, b) = (rand_sum / 2000.0, best_sum / 2000.0);
    assert!(r > 0.5 && r < 3.0, "random rate {r}");
    assert!(b > 2.0 * r && b < 10.0, "best rate {b}");
}

#[test]
fn irs_rejects_illegal_actions() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(2)).unwrap();
    assert_eq!(env.step(&HybridAction::discrete(vec![0, 0, 0])), Err(EnvError::NotReset));
    env.reset(0);
    let bad = HybridAction::discrete(vec![3, 0, 0]);
    assert_eq!(env.step(&bad), Err(EnvError::IllegalAction(bad.clone())));
    assert!(IrsEnv::new(IrsScenario::with_elements(0)).is_err());
}

#[test]
fn irs_episodes_are_seed_deterministic() {
    let mut env = IrsEnv::new(IrsScenario::with_elements(8)).unwrap();
    assert_eq!(run_episode(&mut env, 5), run_episode(&mut env, 5));
}

proptest! {
    #[test]
    fn rate_is_monotone_in_power(seed in 0u64..1000, p1 in 0.0f64..2.0, p2 in 0.0f64..2.0) {
        let mut env = IrsEnv::new(IrsScenario::with_elements(6)).unwrap();
        env.reset(seed);
        let ch = env.channel().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0..4) as f64 * PI / 2.0).collect();
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let noise = env.scenario().noise_power;
        prop_assert!(compute_rate(&ch, lo, &phases, noise) <= compute_rate(&ch, hi, &phases, noise));
    }
}

#[test]
fn uav_reset_properties() {
    let mut env = UavEnv::new(UavScenario::with_uavs(2)).unwrap();
    assert_eq!(env.reset(1), env.reset(1));
    assert_ne!(env.reset(1), env.reset(2));
    assert_eq!(env.uav_positions().len(), 2);
    for seed in 0..1000 {
        env.reset(seed);
        for w in env.remaining() {
            assert!((10.0..=20.0).contains(&w), "{w}");
        }
    }
    assert_eq!(env.state_dim(), 10 + 2 * (2 + 3 * 10));
    let s = env.reset(3);
    assert_eq!(s.len(), env.state_dim());
    let w = env.remaining();
    for i in 0..10 {
        assert_eq!(s[i], w[i] / 20.0);
    }
    // relative offsets of user 0 from UAV 1
    let (p, u) = (env.uav_positions()[1], env.users()[0].position);
    let base = 10 + (2 + 30);
    assert_eq!(s[base], p[0] / 100.0);
    assert_eq!(s[base + 2], (u[0] - p[0]) / 100.0);
    assert_eq!(s[base + 3], (u[1] - p[1]) / 100.0);
    let cap = env.capacity_bits(p, u) as f64 / env.capacity_bits([0.0; 2], [0.0; 2]) as f64;
    assert_eq!(s[base + 4], cap);
}

#[test]
fn uav_rate_values() {
    let sc = UavScenario::default();
    // hand evaluation of log2(1 + 6000 / d^2)
    for (d, expect) in [(10.0, 5.930737337562887), (50.0, 1.765534746362977), (141.0, 0.380503036563304)] {
        assert!((sc.rate(d) - expect).abs() < 1e-12, "{d}: {}", sc.rate(d));
    }
    assert!((sc.rate(20.0) - 4.0).abs() < 1e-12);
    let snr = |d: f64| sc.reference_snr / d.powf(sc.pathloss_exponent);
    assert!((snr(30.0) / snr(60.0) - 4.0).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for d in (20..200).map(|x| x as f64) {
        assert!(sc.rate(d) < prev);
        prev = sc.rate(d);
    }
}

#[test]
fn uav_zero_workload_finishes_immediately() {
    let sc = UavScenario {
        workload_range: [0.0, 0.0],
        ..UavScenario::default()
    };
    let mut env = UavEnv::new(sc).unwrap();
    env.reset(0);
    let s = env.step(&HybridAction::discrete(vec![4, 0, 4, 1])).unwrap();
    assert_eq!(s.reward, 0.0);
    assert!(s.done);
}

#[test]
fn uav_service_saturates_at_remaining_workload() {
    let sc = UavScenario {
        num_uavs: 1,
        // 5 Mb per slot straight overhead
        reference_snr: 31.0 * 400.0,
        ..UavScenario::default()
    };
    let mut env = UavEnv::new(sc).unwrap();
    env.reset(0);
    let mut users = env.users().to_vec();
    users[0].position = [30.0, 30.0];
    let mut rem = vec![15.0; 10];
    rem[0] = 0.1;
    env.set_state(vec![[30.0, 30.0]], users, &rem);
    assert_eq!(env.capacity_bits([30.0, 30.0], [30.0, 30.0]), 5_000_000);
    let s = env.step(&HybridAction::discrete(vec![4, 0])).unwrap();
    assert!((s.reward - 0.1).abs() < 1e-12);
    assert_eq!(env.remaining_bits()[0], 0);
}

#[test]
fn uav_conflict_serves_in_index_order() {
    let mut env = UavEnv::new(UavScenario::with_uavs(2)).unwrap();
    env.reset(0);
    let mut users = env.users().to_vec();
    users[3].position = [50.0, 50.0];
    let mut rem = vec![15.0; 10];
    rem[3] = 5.0;
    env.set_state(vec![[50.0, 50.0], [50.0, 50.0]], users, &rem);
    let cap = env.capacity_bits([50.0, 50.0], [50.0, 50.0]);
    env.step(&HybridAction::discrete(vec![4, 3, 4, 3])).unwrap();
    assert_eq!(cap, 4_000_000);
    // UAV 0 takes 4 Mb, UAV 1 gets the last 1 Mb
    assert_eq!(env.last_served_bits(), 5_000_000);
    assert_eq!(env.remaining_bits()[3], 0);
}

/// Recomputes a slot's reward from logged positions and workloads.
fn replay_reward(env: &UavEnv, uavs_before: &[[f64; 2]], users: &[UserMotion], rem_bits: &[u64], a: &HybridAction) -> u64 {
    let sc = env.scenario();
    let mut rem = rem_bits.to_vec();
    let mut total = 0;
    for k in 0..sc.num_uavs {
        let dir = DIRECTIONS[a.discrete[2 * k]];
        let p = [
            (uavs_before[k][0] + dir[0] * sc.uav_speed).clamp(0.0, sc.region),
            (uavs_before[k][1] + dir[1] * sc.uav_speed).clamp(0.0, sc.region),
        ];
        let u = users[a.discrete[2 * k + 1]].position;
        let d = ((p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2) + sc.uav_altitude.powi(2)).sqrt();
        let cap = (sc.bandwidth_mhz * (1.0 + sc.reference_snr / d.powf(sc.pathloss_exponent)).log2() * 1e6).floor() as u64;
        let s = cap.min(rem[a.discrete[2 * k + 1]]);
        rem[a.discrete[2 * k + 1]] -= s;
        total += s;
    }
    total
}

#[test]
fn uav_conservation_and_replay_over_many_episodes() {
    let mut env = UavEnv::new(UavScenario::with_uavs(3)).unwrap();
    let space = env.action_space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for ep in 0..100 {
        env.reset(ep);
        let initial = env.initial_bits();
        let initial_mb: f64 = env.remaining().iter().sum();
        let mut served_bits = 0u64;
        let mut ret = 0.0;
        loop {
            let (uavs, users, rem) = (env.uav_positions().to_vec(), env.users().to_vec(), env.remaining_bits().to_vec());
            let a = space.sample(&mut rng);
            let s = env.step(&a).unwrap();
            assert_eq!(env.last_served_bits(), replay_reward(&env, &uavs, &users, &rem, &a));
            served_bits += env.last_served_bits();
            ret += s.reward;
            for p in env.uav_positions() {
                assert!((0.0..=100.0).contains(&p[0]) && (0.0..=100.0).contains(&p[1]));
            }
            if s.done {
                break;
            }
        }
        let remaining: u64 = env.remaining_bits().iter().sum();
        assert_eq!(initial, remaining + served_bits);
        assert!(ret <= initial_mb + 1e-9);
    }
}

#[test]
fn uav_episodes_are_seed_deterministic() {
    let mut env = UavEnv::new(UavScenario::with_uavs(2)).unwrap();
    assert_eq!(run_episode(&mut env, 8), run_episode(&mut env, 8));
}

#[test]
fn mobility_full_memory_is_straight_line() {
    let params = MobilityParams {
        memory: 1.0,
        mean_velocity: [0.0, 0.0],
        velocity_std: 0.0,
    };
    let mut users = vec![UserMotion {
        position: [10.0, 20.0],
        velocity: [0.5, -0.25],
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 1..=20 {
        mobility_step(&mut users, &params, 100.0, &mut rng);
        assert!((users[0].position[0] - (10.0 + 0.5 * t as f64)).abs() < 1e-12);
        assert!((users[0].position[1] - (20.0 - 0.25 * t as f64)).abs() < 1e-12);
        assert_eq!(users[0].velocity, [0.5, -0.25]);
    }
}

#[test]
fn mobility_zero_memory_is_uncorrelated() {
    let params = MobilityParams {
        memory: 0.0,
        mean_velocity: [0.0, 0.0],
        velocity_std: 1.0,
    };
    let mut users = vec![UserMotion {
        position: [50.0, 50.0],
        velocity: [0.0, 0.0],
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vs = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        mobility_step(&mut users, &params, 1e9, &mut rng);
        vs.push(users[0].velocity[0]);
    }
    let mean = vs.iter().sum::<f64>() / vs.len() as f64;
    let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let cov = vs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>();
    assert!((cov / var).abs() < 0.05, "lag-1 autocorrelation {}", cov / var);
}

#[test]
fn mobility_stays_in_region() {
    let params = MobilityParams {
        memory: 0.9,
        mean_velocity: [3.0, -2.0],
        velocity_std: 4.0,
    };
    let mut users: Vec<UserMotion> = (0..3)
        .map(|i| UserMotion {
            position: [10.0 * i as f64, 50.0],
            velocity: [0.0, 0.0],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100_000 {
        mobility_step(&mut users, &params, 100.0, &mut rng);
        for u in &users {
            assert!((0.0..=100.0).contains(&u.position[0]) && (0.0..=100.0).contains(&u.position[1]));
        }
    }
}

#[test]
fn scenario_spec_round_trips_through_toml() {
    let s = Scenario {
        id: "irs8".into(),
        spec: ScenarioSpec::Irs(IrsScenario::with_elements(8)),
    };
    let text = toml::to_string(&s).unwrap();
    let back: Scenario = toml::from_str(&text).unwrap();
    assert_eq!(back, s);
    let short: Scenario = toml::from_str("id = \"u3\"\ntask = \"uav\"\nnum_uavs = 3\n").unwrap();
    assert_eq!(short.spec, ScenarioSpec::Uav(UavScenario::with_uavs(3)));
    assert_eq!(short.spec.build().unwrap().state_dim(), 10 + 3 * (2 + 3 * 10));
}
