use std::collections::VecDeque;

use super::{DtError, DtModel, HybridAction, SeqInput};
use crate::env::Environment;

/// Sliding context of the last `K` steps during online inference.
#[derive(Clone, Debug)]
pub struct RolloutContext {
    capacity: usize,
    target: f64,
    accrued: f64,
    time: usize,
    start_time: usize,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<HybridAction>,
    returns_to_go: VecDeque<f64>,
}

impl RolloutContext {
    pub fn new(capacity: usize, target: f64) -> Self {
        Self {
            capacity: capacity.max(1),
            target,
            accrued: 0.0,
            time: 0,
            start_time: 0,
            states: VecDeque::new(),
            actions: VecDeque::new(),
            returns_to_go: VecDeque::new(),
        }
    }

    /// Appends an observed state with the remaining return to go,
    /// evicting the oldest step once the window is full.
    pub fn observe(&mut self, state: Vec<f64>) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
            self.actions.pop_front();
            self.returns_to_go.pop_front();
            self.start_time += 1;
        }
        self.states.push_back(state);
        self.returns_to_go.push_back((self.target - self.accrued).max(0.0));
    }

    /// Records the action taken for the latest state and its reward.
    pub fn record(&mut self, action: HybridAction, reward: f64) {
        self.actions.push_back(action);
        self.accrued += reward;
        self.time += 1;
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn accrued(&self) -> f64 {
        self.accrued
    }

    pub fn start_time(&self) -> usize {
        self.start_time
    }

    pub fn returns_to_go(&self) -> Vec<f64> {
        self.returns_to_go.iter().copied().collect()
    }

    /// Action for the latest observed state.
    pub fn predict(&mut self, model: &DtModel, scenario: &str) -> Result<HybridAction, DtError> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(DtError::Config("predict needs exactly one state without an action".into()));
        }
        let states = self.states.make_contiguous().to_vec();
        let actions = self.actions.make_contiguous().to_vec();
        let rtg = self.returns_to_go();
        model.predict(&SeqInput {
            scenario,
            desired_return: self.target,
            returns_to_go: &rtg,
            states: &states,
            actions: &actions,
            start_time: self.start_time,
        })
    }
}

/// Outcome of one greedy episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<HybridAction>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs one episode, conditioning on `target` as the desired return.
pub fn rollout(model: &DtModel, scenario: &str, env: &mut dyn Environment, seed: u64, target: f64) -> Result<Episode, DtError> {
    model.scenario(scenario)?;
    let mut ctx = RolloutContext::new(model.config.context_len, target);
    let mut state = env.reset(seed);
    let mut ep = Episode {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    loop {
        ctx.observe(state.clone());
        let action = ctx.predict(model, scenario)?;
        let step = env.step(&action)?;
        ctx.record(action.clone(), step.reward);
        ep.states.push(state);
        ep.actions.push(action);
        ep.rewards.push(step.reward);
        state = step.state;
        if step.done {
            return Ok(ep);
        }
    }
}

/// Mean return of greedy rollouts over `episodes` seeds starting at `seed`.
pub fn evaluate(model: &DtModel, scenario: &str, env: &mut dyn Environment, seed: u64, episodes: usize, target: f64) -> Result<f64, DtError> {
    if episodes == 0 {
        return Err(DtError::Config("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for i in 0..episodes as u64 {
        total += rollout(model, scenario, env, seed.wrapping_add(i), target)?.total_return();
    }
    Ok(total / episodes as f64)
}
