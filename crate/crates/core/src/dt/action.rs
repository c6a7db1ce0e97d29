use rand::Rng;
use serde::{Deserialize, Serialize};

/// An action with categorical parts and bounded real parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridAction {
    pub discrete: Vec<usize>,
    pub continuous: Vec<f64>,
}

impl HybridAction {
    pub fn discrete(parts: Vec<usize>) -> Self {
        Self {
            discrete: parts,
            continuous: Vec::new(),
        }
    }
}

/// Legal values of each action part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    /// Cardinality of each discrete part.
    pub discrete: Vec<usize>,
    /// `[lo, hi]` of each continuous part.
    pub continuous: Vec<(f64, f64)>,
}

impl ActionSpace {
    pub fn discrete(cards: Vec<usize>) -> Self {
        Self {
            discrete: cards,
            continuous: Vec::new(),
        }
    }

    pub fn num_parts(&self) -> usize {
        self.discrete.len() + self.continuous.len()
    }

    pub fn contains(&self, a: &HybridAction) -> bool {
        a.discrete.len() == self.discrete.len()
            && a.continuous.len() == self.continuous.len()
            && a.discrete.iter().zip(&self.discrete).all(|(&i, &c)| i < c)
            && a
                .continuous
                .iter()
                .zip(&self.continuous)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HybridAction {
        HybridAction {
            discrete: self.discrete.iter().map(|&c| rng.gen_range(0..c)).collect(),
            continuous: self
                .continuous
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                .collect(),
        }
    }

    /// Flat encoding used in dataset files: discrete indices then continuous values.
    pub fn flatten(&self, a: &HybridAction) -> Vec<f64> {
        a.discrete
            .iter()
            .map(|&i| i as f64)
            .chain(a.continuous.iter().copied())
            .collect()
    }

    /// Inverse of [`ActionSpace::flatten`]; `None` when the row is not a legal action.
    pub fn unflatten(&self, row: &[f64]) -> Option<HybridAction> {
        if row.len() != self.num_parts() {
            return None;
        }
        let (d, c) = row.split_at(self.discrete.len());
        let mut discrete = Vec::with_capacity(d.len());
        for &x in d {
            if x < 0.0 || x.fract() != 0.0 {
                return None;
            }
            discrete.push(x as usize);
        }
        let a = HybridAction {
            discrete,
            continuous: c.to_vec(),
        };
        self.contains(&a).then_some(a)
    }
}
