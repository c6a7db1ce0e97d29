use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Gauss-Markov velocity process parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityParams {
    /// Memory `eta` in `[0, 1]`.
    pub memory: f64,
    /// Mean velocity, m per slot.
    pub mean_velocity: [f64; 2],
    /// Standard deviation of the velocity innovation, m per slot.
    pub velocity_std: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self {
            memory: 0.8,
            mean_velocity: [0.0, 0.0],
            velocity_std: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserMotion {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

/// Folds `x` into `[0, side]` by mirror reflection; returns whether the
/// direction of travel flipped.
fn reflect(x: f64, side: f64) -> (f64, bool) {
    if (0.0..=side).contains(&x) {
        return (x, false);
    }
    let period = 2.0 * side;
    let m = x.rem_euclid(period);
    if m <= side {
        (m, false)
    } else {
        (period - m, true)
    }
}

/// One slot of user movement: `v' = eta v + (1 - eta) vbar + sqrt(1 - eta^2) w`,
/// then `p += v'`, reflected at the square region's edges.
pub fn mobility_step<R: Rng + ?Sized>(users: &mut [UserMotion], params: &MobilityParams, side: f64, rng: &mut R) {
    let eta = params.memory;
    let noise = (1.0 - eta * eta).max(0.0).sqrt() * params.velocity_std;
    for u in users.iter_mut() {
        for d in 0..2 {
            let w: f64 = StandardNormal.sample(rng);
            let v = eta * u.velocity[d] + (1.0 - eta) * params.mean_velocity[d] + noise * w;
            let (p, flipped) = reflect(u.position[d] + v, side);
            u.position[d] = p;
            u.velocity[d] = if flipped { -v } else { v };
        }
    }
}
