//! Writes a trajectory dataset and a checkpoint, reads both back, and shows
//! the error for a damaged dataset line.

use std::fs;

use dtwireless::dt::{load_checkpoint, save_checkpoint, DtConfig, DtModel, ScenarioEntry, Trajectory};
use dtwireless::env::{random_episode_return, Environment, IrsEnv, IrsScenario, Scenario, ScenarioSpec, Task};
use dtwireless::pipeline::{load_dataset, save_dataset, DatasetFile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let scenario = IrsScenario {
        episode_len: 5,
        ..IrsScenario::with_elements(4)
    };
    let mut env = IrsEnv::new(scenario.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let space = env.action_space().clone();
    let trajectories: Vec<Trajectory> = (0..4)
        .map(|seed| {
            let mut state = env.reset(seed);
            let (mut s, mut a, mut r) = (vec![], vec![], vec![]);
            loop {
                let act = space.sample(&mut rng);
                let step = env.step(&act).unwrap();
                s.push(std::mem::replace(&mut state, step.state));
                a.push(act);
                r.push(step.reward);
                if step.done {
                    return Trajectory::new("irs4", s, a, r, false).unwrap();
                }
            }
        })
        .collect();
    println!("one random episode returns {:.2}", random_episode_return(&mut env, 9).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.jsonl");
    let scenarios = vec![Scenario {
        id: "irs4".into(),
        spec: ScenarioSpec::Irs(scenario),
    }];
    let ds = DatasetFile::new(Task::Irs, scenarios, trajectories).unwrap();
    save_dataset(&path, &ds).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    println!("dataset round trip ok ({} bytes)", fs::metadata(&path).unwrap().len());

    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"scenario_id\": \"irs4\"";
    fs::write(&path, lines.join("\n")).unwrap();
    println!("damaged file: {}", load_dataset(&path).unwrap_err());

    let mut model = DtModel::new(DtConfig::default(), &mut rng).unwrap();
    let refs: Vec<&Trajectory> = ds.trajectories.iter().collect();
    let entry = ScenarioEntry::from_data("irs4", env.state_dim(), space, env.prompt_features(), &refs).unwrap();
    model.add_scenario(entry, &mut rng).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &model, 42).unwrap();
    let (back, seed) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(back, model);
    println!("checkpoint round trip ok (seed {seed}, {} parameters)", back.parameter_count());
}
