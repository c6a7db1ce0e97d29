//! Pre-train on IRS surfaces with 4 and 8 elements, then adapt to 12
//! elements from a handful of episodes with the lower blocks frozen.

use dtwireless::dt::{
    evaluate, finetune, pretrain, DtConfig, DtModel, FreezeSpec, ScenarioEntry, Schedule, Trajectory, TRUNK,
};
use dtwireless::env::{Environment, IrsEnv, IrsScenario};
use dtwireless::transformer::TransformerConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn best_episodes(id: &str, env: &mut IrsEnv, seeds: std::ops::Range<u64>) -> Vec<Trajectory> {
    seeds
        .map(|seed| {
            let mut state = env.reset(seed);
            let (mut s, mut a, mut r) = (vec![], vec![], vec![]);
            loop {
                let act = env.best_action().unwrap();
                let step = env.step(&act).unwrap();
                s.push(std::mem::replace(&mut state, step.state));
                a.push(act);
                r.push(step.reward);
                if step.done {
                    return Trajectory::new(id, s, a, r, true).unwrap();
                }
            }
        })
        .collect()
}

fn irs(n: usize) -> IrsEnv {
    IrsEnv::new(IrsScenario {
        episode_len: 30,
        ..IrsScenario::with_elements(n)
    })
    .unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
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
    let mut data = Vec::new();
    for n in [4, 8] {
        let id = format!("irs{n}");
        let mut env = irs(n);
        let eps = best_episodes(&id, &mut env, 0..100);
        let refs: Vec<&Trajectory> = eps.iter().collect();
        let entry = ScenarioEntry::from_data(&id, env.state_dim(), env.action_space().clone(), env.prompt_features(), &refs).unwrap();
        model.add_scenario(entry, &mut rng).unwrap();
        data.extend(eps);
    }
    pretrain(&mut model, &data, &Schedule::with_steps(600).lr(3e-4), 1).unwrap();

    let mut target = irs(12);
    let few = best_episodes("irs12", &mut target, 500..510);
    let refs: Vec<&Trajectory> = few.iter().collect();
    let entry = ScenarioEntry::from_data("irs12", target.state_dim(), target.action_space().clone(), target.prompt_features(), &refs).unwrap();
    let before = model.clone();
    finetune(&mut model, entry, &few, &FreezeSpec::lower_blocks(2), &Schedule::with_steps(300).lr(3e-4), 2).unwrap();

    let goal = model.scenario("irs12").unwrap().max_return;
    let expert: f64 = best_episodes("irs12", &mut target, 1000..1020).iter().map(|t| t.total_return()).sum::<f64>() / 20.0;
    let got = evaluate(&model, "irs12", &mut target, 1000, 20, goal).unwrap();
    println!("N=12 after 10 episodes: {got:.1} (best possible {expert:.1})");

    let frozen_same = ["block0.", "block1."].iter().all(|b| {
        before
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{TRUNK}{b}")))
            .all(|(n, t)| model.params.get(n) == Some(t))
    });
    println!("frozen blocks untouched: {frozen_same}");
}
