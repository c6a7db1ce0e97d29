use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Step};
use crate::dt::{ActionSpace, HybridAction};

/// Single-BS, single-IRS, single-user downlink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrsScenario {
    pub num_elements: usize,
    pub phase_levels: usize,
    /// Allowed BS transmit powers, W.
    pub power_levels: Vec<f64>,
    pub direct_exponent: f64,
    pub bs_irs_exponent: f64,
    pub irs_user_exponent: f64,
    /// Linear Rician K-factor of every link; `inf` gives pure line of sight.
    pub rician_k: f64,
    /// Path gain at 1 m.
    pub reference_gain: f64,
    /// Noise power, W.
    pub noise_power: f64,
    /// Per-slot correlation of the scattered components.
    pub correlation: f64,
    pub episode_len: usize,
    pub wavelength: f64,
    pub bs_position: [f64; 3],
    pub irs_position: [f64; 3],
    pub user_position: [f64; 3],
}

impl Default for IrsScenario {
    fn default() -> Self {
        Self {
            num_elements: 8,
            phase_levels: 4,
            power_levels: vec![0.1, 0.5, 1.0],
            // the direct path is obstructed, so the IRS carries most of the gain
            direct_exponent: 4.3,
            bs_irs_exponent: 2.2,
            irs_user_exponent: 2.2,
            rician_k: 3.0,
            reference_gain: 0.025,
            noise_power: 1e-9,
            correlation: 0.95,
            episode_len: 100,
            wavelength: 0.1,
            bs_position: [0.0, 0.0, 10.0],
            irs_position: [45.0, 10.0, 10.0],
            user_position: [50.0, 0.0, 1.5],
        }
    }
}

impl IrsScenario {
    pub fn with_elements(num_elements: usize) -> Self {
        Self {
            num_elements,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidScenario(m.to_string()));
        if self.num_elements == 0 {
            return bad("num_elements must be at least 1");
        }
        if self.phase_levels == 0 {
            return bad("phase_levels must be at least 1");
        }
        if self.power_levels.is_empty() || self.power_levels.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return bad("power_levels must be non-empty, finite and non-negative");
        }
        if [self.direct_exponent, self.bs_irs_exponent, self.irs_user_exponent]
            .iter()
            .any(|&a| !(a > 0.0 && a.is_finite()))
        {
            return bad("pathloss exponents must be positive");
        }
        if !(self.rician_k >= 0.0) {
            return bad("rician_k must be non-negative");
        }
        if !(self.reference_gain > 0.0 && self.noise_power > 0.0 && self.wavelength > 0.0) {
            return bad("reference_gain, noise_power and wavelength must be positive");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be positive");
        }
        Ok(())
    }

    pub fn max_power(&self) -> f64 {
        self.power_levels.iter().copied().fold(0.0, f64::max)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.num_elements + 3
    }

    pub fn action_space(&self) -> ActionSpace {
        let mut cards = vec![self.power_levels.len()];
        cards.extend(std::iter::repeat(self.phase_levels).take(self.num_elements));
        ActionSpace::discrete(cards)
    }

    fn element_positions(&self) -> Vec<[f64; 3]> {
        let n = self.num_elements;
        let spacing = self.wavelength / 2.0;
        (0..n)
            .map(|i| {
                let off = (i as f64 - (n as f64 - 1.0) / 2.0) * spacing;
                [self.irs_position[0] + off, self.irs_position[1], self.irs_position[2]]
            })
            .collect()
    }

    /// Deterministic line-of-sight parts of the three links, including pathloss.
    pub fn line_of_sight(&self) -> Channel {
        let los = |a: [f64; 3], b: [f64; 3], alpha: f64| {
            let d = dist(a, b);
            let amp = (self.reference_gain * d.powf(-alpha)).sqrt();
            Complex64::from_polar(amp, -2.0 * PI * d / self.wavelength)
        };
        let elems = self.element_positions();
        Channel {
            direct: los(self.bs_position, self.user_position, self.direct_exponent),
            bs_irs: elems.iter().map(|&e| los(self.bs_position, e, self.bs_irs_exponent)).collect(),
            irs_user: elems.iter().map(|&e| los(e, self.user_position, self.irs_user_exponent)).collect(),
        }
    }

    fn phase(&self, k: usize) -> f64 {
        2.0 * PI * k as f64 / self.phase_levels as f64
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Complex baseband coefficients of the direct and reflected paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub direct: Complex64,
    pub bs_irs: Vec<Complex64>,
    pub irs_user: Vec<Complex64>,
}

impl Channel {
    /// Per-element cascaded coefficients `g_n f_n`.
    pub fn cascaded(&self) -> Vec<Complex64> {
        self.bs_irs.iter().zip(&self.irs_user).map(|(f, g)| f * g).collect()
    }

    /// `h_d + sum_n g_n f_n e^{j theta_n}`.
    pub fn combined(&self, phases: &[f64]) -> Complex64 {
        self.cascaded()
            .iter()
            .zip(phases)
            .fold(self.direct, |acc, (c, &t)| acc + c * Complex64::from_polar(1.0, t))
    }
}

/// Achievable rate in bits/s/Hz for power `p` and phase shifts `phases`.
pub fn compute_rate(channel: &Channel, p: f64, phases: &[f64], noise_power: f64) -> f64 {
    (1.0 + p * channel.combined(phases).norm_sqr() / noise_power).log2()
}

/// Scattered-component state of one link.
#[derive(Clone, Debug)]
struct Fading {
    los: Vec<Complex64>,
    scatter: Vec<Complex64>,
}

fn cn<R: rand::Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

impl Fading {
    fn new<R: rand::Rng>(los: Vec<Complex64>, rng: &mut R) -> Self {
        let scatter = los.iter().map(|_| cn(rng)).collect();
        Self { los, scatter }
    }

    fn evolve<R: rand::Rng>(&mut self, rho: f64, rng: &mut R) {
        let innov = (1.0 - rho * rho).sqrt();
        for z in &mut self.scatter {
            *z = *z * rho + cn(rng) * innov;
        }
    }

    fn coefficients(&self, k: f64) -> Vec<Complex64> {
        if k.is_infinite() {
            return self.los.clone();
        }
        let (a, b) = ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt());
        self.los
            .iter()
            .zip(&self.scatter)
            .map(|(l, z)| l * a + z * (l.norm() * b))
            .collect()
    }
}

pub struct IrsEnv {
    scenario: IrsScenario,
    space: ActionSpace,
    rng: ChaCha8Rng,
    links: Option<[Fading; 3]>,
    channel: Option<Channel>,
    prev_rate: f64,
    t: usize,
}

impl IrsEnv {
    pub fn new(scenario: IrsScenario) -> Result<Self, EnvError> {
        scenario.validate()?;
        Ok(Self {
            space: scenario.action_space(),
            scenario,
            rng: ChaCha8Rng::seed_from_u64(0),
            links: None,
            channel: None,
            prev_rate: 0.0,
            t: 0,
        })
    }

    pub fn scenario(&self) -> &IrsScenario {
        &self.scenario
    }

    /// Channel the next action will be applied to.
    pub fn channel(&self) -> Option<&Channel> {
        self.channel.as_ref()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Power and phase angles encoded by a legal action.
    pub fn decode(&self, action: &HybridAction) -> Result<(f64, Vec<f64>), EnvError> {
        if !self.space.contains(action) {
            return Err(EnvError::IllegalAction(action.clone()));
        }
        let p = self.scenario.power_levels[action.discrete[0]];
        let phases = action.discrete[1..].iter().map(|&k| self.scenario.phase(k)).collect();
        Ok((p, phases))
    }

    pub fn rate_of(&self, channel: &Channel, action: &HybridAction) -> Result<f64, EnvError> {
        let (p, phases) = self.decode(action)?;
        Ok(compute_rate(channel, p, &phases, self.scenario.noise_power))
    }

    fn refresh_channel(&mut self) {
        let links = self.links.as_ref().expect("links initialized");
        let k = self.scenario.rician_k;
        self.channel = Some(Channel {
            direct: links[0].coefficients(k)[0],
            bs_irs: links[1].coefficients(k),
            irs_user: links[2].coefficients(k),
        });
    }

    /// Observation: direct link and cascaded coefficients rotated so the
    /// direct link is real, scaled by `sqrt(P_max / sigma^2)`, then the
    /// previous rate over 10.
    fn observe(&self) -> Vec<f64> {
        let ch = self.channel.as_ref().expect("channel initialized");
        let scale = (self.scenario.max_power() / self.scenario.noise_power).sqrt();
        let rot = Complex64::from_polar(scale, -ch.direct.arg());
        let mut s = Vec::with_capacity(self.scenario.state_dim());
        s.push(self.prev_rate / 10.0);
        let d = ch.direct * rot;
        s.extend([d.re, d.im]);
        for c in ch.cascaded() {
            let c = c * rot;
            s.extend([c.re, c.im]);
        }
        s
    }

    /// Rate-maximizing action for the current channel.
    ///
    /// Every optimum aligns each element with the phase `psi` of the total
    /// sum, and the per-element choice only changes at `N * L` breakpoints
    /// in `psi`, so scanning one `psi` per arc between breakpoints is exact.
    pub fn best_action(&self) -> Option<HybridAction> {
        let ch = self.channel.as_ref()?;
        let sc = &self.scenario;
        let power = sc
            .power_levels
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0;
        let casc = ch.cascaded();
        let levels = sc.phase_levels;
        let step = 2.0 * PI / levels as f64;
        let mut cuts: Vec<f64> = Vec::with_capacity(casc.len() * levels);
        for c in &casc {
            for k in 0..levels {
                cuts.push((c.arg() + (k as f64 + 0.5) * step).rem_euclid(2.0 * PI));
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (i, &a) in cuts.iter().enumerate() {
            let b = if i + 1 < cuts.len() {
                cuts[i + 1]
            } else {
                cuts[0] + 2.0 * PI
            };
            let psi = 0.5 * (a + b);
            let choice: Vec<usize> = casc
                .iter()
                .map(|c| ((psi - c.arg()) / step).round().rem_euclid(levels as f64) as usize % levels)
                .collect();
            let phases: Vec<f64> = choice.iter().map(|&k| sc.phase(k)).collect();
            let gain = ch.combined(&phases).norm_sqr();
            if best.as_ref().map_or(true, |(g, _)| gain > *g) {
                best = Some((gain, choice));
            }
        }
        let (_, phases) = best?;
        let mut parts = vec![power];
        parts.extend(phases);
        Some(HybridAction::discrete(parts))
    }
}

impl Environment for IrsEnv {
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
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let los = self.scenario.line_of_sight();
        self.links = Some([
            Fading::new(vec![los.direct], &mut self.rng),
            Fading::new(los.bs_irs, &mut self.rng),
            Fading::new(los.irs_user, &mut self.rng),
        ]);
        self.refresh_channel();
        self.prev_rate = 0.0;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &HybridAction) -> Result<Step, EnvError> {
        let channel = self.channel.as_ref().ok_or(EnvError::NotReset)?;
        if self.t >= self.scenario.episode_len {
            return Err(EnvError::EpisodeDone);
        }
        let reward = self.rate_of(channel, action)?;
        let rho = self.scenario.correlation;
        for link in self.links.as_mut().expect("links initialized") {
            link.evolve(rho, &mut self.rng);
        }
        self.refresh_channel();
        self.prev_rate = reward;
        self.t += 1;
        Ok(Step {
            state: self.observe(),
            reward,
            done: self.t >= self.scenario.episode_len,
        })
    }

    fn prompt_features(&self) -> Vec<f64> {
        let s = &self.scenario;
        vec![
            s.max_power(),
            s.num_elements as f64 / 64.0,
            s.phase_levels as f64 / 8.0,
            s.direct_exponent / 5.0,
            s.bs_irs_exponent / 3.0,
            s.irs_user_exponent / 3.0,
            if s.rician_k.is_finite() { s.rician_k / 10.0 } else { 1.0 },
        ]
    }
}
