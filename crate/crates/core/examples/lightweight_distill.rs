//! Distills a dense decision transformer into a shared-head, sliding-window
//! student and compares size and return.

use dtwireless::dt::{distill, evaluate, pretrain, DtConfig, DtModel, ScenarioEntry, Schedule, Trajectory};
use dtwireless::env::{Environment, IrsEnv, IrsScenario};
use dtwireless::transformer::{count_parameters, AttentionVariant, TransformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut env = IrsEnv::new(IrsScenario {
        episode_len: 30,
        ..IrsScenario::with_elements(8)
    })
    .unwrap();
    let data: Vec<Trajectory> = (0..150)
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
                    return Trajectory::new("irs8", s, a, r, true).unwrap();
                }
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dense = TransformerConfig {
        model_dim: 32,
        ffn_dim: 64,
        dropout_rate: 0.0,
        max_sequence_len: 10,
        ..TransformerConfig::default()
    };
    let cfg = DtConfig {
        transformer: dense.clone(),
        context_len: 3,
        max_timestep: 30,
        ..DtConfig::default()
    };
    let mut teacher = DtModel::new(cfg, &mut rng).unwrap();
    let refs: Vec<&Trajectory> = data.iter().collect();
    let entry = ScenarioEntry::from_data("irs8", env.state_dim(), env.action_space().clone(), env.prompt_features(), &refs).unwrap();
    teacher.add_scenario(entry, &mut rng).unwrap();
    let schedule = Schedule::with_steps(600).lr(3e-4);
    pretrain(&mut teacher, &data, &schedule, 3).unwrap();

    let light = dense.clone().with_attention(AttentionVariant::SparseShared { window: 8 });
    let (student, _) = distill(&teacher, light.clone(), &data, &schedule, 1.0, 4).unwrap();

    let goal = teacher.scenario("irs8").unwrap().max_return;
    let t = evaluate(&teacher, "irs8", &mut env, 100, 20, goal).unwrap();
    let s = evaluate(&student, "irs8", &mut env, 100, 20, goal).unwrap();
    println!("trunk parameters: dense {}, student {}", count_parameters(&dense), count_parameters(&light));
    println!("return: dense {t:.1}, student {s:.1}");
}
