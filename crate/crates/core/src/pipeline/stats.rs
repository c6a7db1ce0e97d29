//! Convergence statistics for learning curves.

/// Points averaged by the trailing moving average.
pub const SMOOTHING_WINDOW: usize = 5;
/// Fraction of the baseline plateau that counts as converged.
pub const CONVERGENCE_FRACTION: f64 = 0.9;

/// Trailing mean over up to `window` points ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Mean of the final quarter of the curve (at least one point).
pub fn plateau(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let start = (values.len() * 3 / 4).min(values.len() - 1);
    let tail = &values[start..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// First x at which the smoothed curve reaches `level`.
pub fn convergence_step(steps: &[usize], values: &[f64], level: f64) -> Option<usize> {
    moving_average(values, SMOOTHING_WINDOW)
        .iter()
        .position(|&v| v >= level)
        .map(|i| steps[i])
}

/// Outcome of comparing a candidate curve against a baseline curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Speedup {
    pub baseline_plateau: f64,
    pub candidate_plateau: f64,
    pub level: f64,
    pub baseline_steps: Option<usize>,
    pub candidate_steps: Option<usize>,
}

impl Speedup {
    /// Baseline steps over candidate steps to reach the level; `None` when
    /// either curve never gets there.
    pub fn ratio(&self) -> Option<f64> {
        match (self.baseline_steps, self.candidate_steps) {
            (Some(b), Some(c)) if c > 0 => Some(b as f64 / c as f64),
            _ => None,
        }
    }
}

/// Both curves share the step grid `steps`; the level is a fraction of the
/// baseline plateau.
pub fn speedup(steps: &[usize], baseline: &[f64], candidate: &[f64]) -> Speedup {
    let baseline_plateau = plateau(baseline);
    let level = CONVERGENCE_FRACTION * baseline_plateau;
    Speedup {
        baseline_plateau,
        candidate_plateau: plateau(candidate),
        level,
        baseline_steps: convergence_step(steps, baseline, level),
        candidate_steps: convergence_step(steps, candidate, level),
    }
}
