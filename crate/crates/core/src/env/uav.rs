use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mobility_step, EnvError, Environment, MobilityParams, Step, UserMotion};
use crate::dt::{ActionSpace, HybridAction};

/// Unit moves for direction indices N, S, E, W, hover.
pub const DIRECTIONS: [[f64; 2]; 5] = [[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];

const BITS_PER_MB: f64 = 1e6;

/// UAV-mounted edge servers over a square region of mobile users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UavScenario {
    pub num_uavs: usize,
    pub num_users: usize,
    /// Side of the square region, m.
    pub region: f64,
    pub uav_altitude: f64,
    /// Distance flown per slot, m.
    pub uav_speed: f64,
    /// Initial per-user workload range, Mb.
    pub workload_range: [f64; 2],
    pub episode_len: usize,
    pub pathloss_exponent: f64,
    /// Received SNR at 1 m (noise power folded in).
    pub reference_snr: f64,
    pub bandwidth_mhz: f64,
    pub slot_seconds: f64,
    pub mobility: MobilityParams,
}

impl Default for UavScenario {
    fn default() -> Self {
        Self {
            num_uavs: 2,
            num_users: 10,
            region: 100.0,
            uav_altitude: 20.0,
            uav_speed: 5.0,
            workload_range: [10.0, 20.0],
            episode_len: 20,
            pathloss_exponent: 2.0,
            // log2(1 + 6000 / 20^2) = 4 Mb per slot straight overhead
            reference_snr: 6000.0,
            bandwidth_mhz: 1.0,
            slot_seconds: 1.0,
            mobility: MobilityParams::default(),
        }
    }
}

impl UavScenario {
    pub fn with_uavs(num_uavs: usize) -> Self {
        Self {
            num_uavs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidScenario(m.to_string()));
        if self.num_uavs == 0 || self.num_users == 0 {
            return bad("num_uavs and num_users must be positive");
        }
        if !(self.region > 0.0 && self.uav_altitude > 0.0 && self.uav_speed >= 0.0) {
            return bad("region and altitude must be positive, speed non-negative");
        }
        let [lo, hi] = self.workload_range;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return bad("workload_range must satisfy 0 <= lo <= hi");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be positive");
        }
        if !(self.pathloss_exponent > 0.0 && self.reference_snr > 0.0 && self.bandwidth_mhz > 0.0 && self.slot_seconds > 0.0)
        {
            return bad("channel parameters must be positive");
        }
        if !(0.0..=1.0).contains(&self.mobility.memory) || self.mobility.velocity_std < 0.0 {
            return bad("mobility memory must lie in [0, 1] and velocity_std be non-negative");
        }
        Ok(())
    }

    /// Data deliverable in one slot at 3-D distance `d`, Mb.
    pub fn rate(&self, d: f64) -> f64 {
        self.bandwidth_mhz * (1.0 + self.reference_snr / d.powf(self.pathloss_exponent)).log2() * self.slot_seconds
    }

    /// Workloads, then per UAV its position and one (dx, dy, capacity) triple per user.
    pub fn state_dim(&self) -> usize {
        self.num_users + self.num_uavs * (2 + 3 * self.num_users)
    }

    /// Parts alternate per UAV: direction, then served user.
    pub fn action_space(&self) -> ActionSpace {
        let mut cards = Vec::with_capacity(2 * self.num_uavs);
        for _ in 0..self.num_uavs {
            cards.push(DIRECTIONS.len());
            cards.push(self.num_users);
        }
        ActionSpace::discrete(cards)
    }

    /// Spawn points spread along the horizontal mid-line.
    pub fn spawn_positions(&self) -> Vec<[f64; 2]> {
        let k = self.num_uavs as f64;
        (0..self.num_uavs)
            .map(|i| [self.region * (i as f64 + 1.0) / (k + 1.0), self.region / 2.0])
            .collect()
    }
}

pub struct UavEnv {
    scenario: UavScenario,
    space: ActionSpace,
    rng: ChaCha8Rng,
    uavs: Vec<[f64; 2]>,
    users: Vec<UserMotion>,
    /// Remaining workload per user, bits.
    remaining: Vec<u64>,
    initial_bits: u64,
    last_served_bits: u64,
    t: usize,
    done: bool,
    started: bool,
}

impl UavEnv {
    pub fn new(scenario: UavScenario) -> Result<Self, EnvError> {
        scenario.validate()?;
        Ok(Self {
            space: scenario.action_space(),
            uavs: scenario.spawn_positions(),
            users: Vec::new(),
            remaining: Vec::new(),
            scenario,
            rng: ChaCha8Rng::seed_from_u64(0),
            initial_bits: 0,
            last_served_bits: 0,
            t: 0,
            done: false,
            started: false,
        })
    }

    pub fn scenario(&self) -> &UavScenario {
        &self.scenario
    }

    pub fn uav_positions(&self) -> &[[f64; 2]] {
        &self.uavs
    }

    pub fn users(&self) -> &[UserMotion] {
        &self.users
    }

    /// Remaining workloads, Mb.
    pub fn remaining(&self) -> Vec<f64> {
        self.remaining.iter().map(|&b| b as f64 / BITS_PER_MB).collect()
    }

    pub fn remaining_bits(&self) -> &[u64] {
        &self.remaining
    }

    pub fn initial_bits(&self) -> u64 {
        self.initial_bits
    }

    /// Bits delivered in the most recent slot.
    pub fn last_served_bits(&self) -> u64 {
        self.last_served_bits
    }

    /// Moves one UAV by a direction index, clipped to the region.
    pub fn moved(&self, from: [f64; 2], dir: usize) -> [f64; 2] {
        let r = self.scenario.region;
        let v = DIRECTIONS[dir];
        [
            (from[0] + v[0] * self.scenario.uav_speed).clamp(0.0, r),
            (from[1] + v[1] * self.scenario.uav_speed).clamp(0.0, r),
        ]
    }

    /// Bits one UAV at `uav` can deliver to a user at `user` in one slot.
    pub fn capacity_bits(&self, uav: [f64; 2], user: [f64; 2]) -> u64 {
        let dx = uav[0] - user[0];
        let dy = uav[1] - user[1];
        let d = (dx * dx + dy * dy + self.scenario.uav_altitude.powi(2)).sqrt();
        (self.scenario.rate(d) * BITS_PER_MB).floor() as u64
    }

    fn observe(&self) -> Vec<f64> {
        let r = self.scenario.region;
        let (lo, hi) = (self.scenario.workload_range[0], self.scenario.workload_range[1]);
        let wscale = hi.max(lo).max(1e-9);
        let overhead = self.capacity_bits([0.0, 0.0], [0.0, 0.0]).max(1) as f64;
        let mut s = Vec::with_capacity(self.scenario.state_dim());
        for &b in &self.remaining {
            s.push(b as f64 / BITS_PER_MB / wscale);
        }
        for &p in &self.uavs {
            s.extend([p[0] / r, p[1] / r]);
            for (u, &left) in self.users.iter().zip(&self.remaining) {
                // capacity is zeroed once the user has nothing left to offload
                let cap = if left > 0 { self.capacity_bits(p, u.position) as f64 / overhead } else { 0.0 };
                s.extend([(u.position[0] - p[0]) / r, (u.position[1] - p[1]) / r, cap]);
            }
        }
        s
    }

    /// Overwrites the dynamic state mid-episode, e.g. to replay a logged slot.
    pub fn set_state(&mut self, uavs: Vec<[f64; 2]>, users: Vec<UserMotion>, remaining_mb: &[f64]) {
        assert_eq!(uavs.len(), self.scenario.num_uavs);
        assert_eq!(users.len(), self.scenario.num_users);
        assert_eq!(remaining_mb.len(), self.scenario.num_users);
        self.uavs = uavs;
        self.users = users;
        self.remaining = remaining_mb.iter().map(|&m| (m * BITS_PER_MB).round() as u64).collect();
        self.done = self.t >= self.scenario.episode_len;
    }

    /// Closest user with work left to a UAV at `pos`, if any.
    pub fn nearest_pending_user(&self, pos: [f64; 2]) -> Option<usize> {
        let d2 = |u: &UserMotion| (u.position[0] - pos[0]).powi(2) + (u.position[1] - pos[1]).powi(2);
        (0..self.users.len())
            .filter(|&i| self.remaining[i] > 0)
            .min_by(|&a, &b| d2(&self.users[a]).total_cmp(&d2(&self.users[b])))
    }
}

impl Environment for UavEnv {
    fn state_dim(&self) -> usize {
        self.scenario.state_dim()
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn episode_len(&self) -> usize {
        self.scenario.episode_len
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let sc = &self.scenario;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.uavs = sc.spawn_positions();
        let [lo, hi] = sc.workload_range;
        let mut users = Vec::with_capacity(sc.num_users);
        let mut remaining = Vec::with_capacity(sc.num_users);
        for _ in 0..sc.num_users {
            let position = [self.rng.gen_range(0.0..=sc.region), self.rng.gen_range(0.0..=sc.region)];
            users.push(UserMotion {
                position,
                velocity: sc.mobility.mean_velocity,
            });
            let mb = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
            remaining.push((mb * BITS_PER_MB).round() as u64);
        }
        self.users = users;
        self.initial_bits = remaining.iter().sum();
        self.remaining = remaining;
        self.last_served_bits = 0;
        self.t = 0;
        self.done = false;
        self.started = true;
        self.observe()
    }

    fn step(&mut self, action: &HybridAction) -> Result<Step, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if !self.space.contains(action) {
            return Err(EnvError::IllegalAction(action.clone()));
        }
        let mut served = 0u64;
        for k in 0..self.scenario.num_uavs {
            let (dir, user) = (action.discrete[2 * k], action.discrete[2 * k + 1]);
            self.uavs[k] = self.moved(self.uavs[k], dir);
            // earlier UAVs drain a shared user first
            let cap = self.capacity_bits(self.uavs[k], self.users[user].position);
            let s = cap.min(self.remaining[user]);
            self.remaining[user] -= s;
            served += s;
        }
        self.last_served_bits = served;
        let side = self.scenario.region;
        mobility_step(&mut self.users, &self.scenario.mobility, side, &mut self.rng);
        self.t += 1;
        self.done = self.t >= self.scenario.episode_len || self.remaining.iter().all(|&b| b == 0);
        Ok(Step {
            state: self.observe(),
            reward: served as f64 / BITS_PER_MB,
            done: self.done,
        })
    }

    fn prompt_features(&self) -> Vec<f64> {
        let s = &self.scenario;
        vec![
            s.num_uavs as f64 / 4.0,
            s.num_users as f64 / 10.0,
            s.uav_speed / 10.0,
            s.uav_altitude / 100.0,
            s.workload_range[1] / 20.0,
            s.region / 100.0,
            s.episode_len as f64 / 100.0,
        ]
    }
}
