use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TRUNK;
use super::train::{train_loop, Schedule};
use super::{DtError, DtModel, Trajectory};
use crate::numerics::{Binder, Graph, ParamSet, Tensor, Var};
use crate::transformer::{self, TransformerConfig};

/// Where a student parameter's teacher counterpart comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TeacherSource {
    /// The teacher parameter of the same name and shape.
    Same(String),
    /// Mean over heads of a per-head projection: column blocks of a
    /// `[d, heads * w]` matrix, or slices of a `[heads * w]` bias.
    HeadMean { name: String, heads: usize },
}

/// Student-to-teacher pairing used by the similarity loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMapping {
    pub pairs: Vec<(String, TeacherSource)>,
    /// Student parameters with no teacher counterpart.
    pub exempt: Vec<String>,
}

fn head_mean(t: &Tensor, heads: usize) -> Tensor {
    let cols = t.cols();
    let w = cols / heads;
    let rows = t.rows();
    let mut out = vec![0.0; rows * w];
    for r in 0..rows {
        for h in 0..heads {
            for c in 0..w {
                out[r * w + c] += t.at(r, h * w + c) / heads as f64;
            }
        }
    }
    let shape = if t.shape().len() == 1 { vec![w] } else { vec![rows, w] };
    Tensor::new(shape, out).expect("head mean shape")
}

impl ParamMapping {
    /// Pairs every student parameter with a teacher parameter of identical
    /// shape; shared-head projections map to the teacher's head mean and
    /// per-head query offsets are exempt.
    pub fn build(teacher: &ParamSet, teacher_cfg: &TransformerConfig, student: &ParamSet, student_cfg: &TransformerConfig) -> Result<Self, DtError> {
        let mut m = Self::default();
        let head_mean_ok = student_cfg.attention.shared() && !teacher_cfg.attention.shared();
        for (name, st) in student.iter() {
            let is_proj = name.starts_with(TRUNK)
                && ["attn.wq", "attn.wk", "attn.wv", "attn.bq", "attn.bk", "attn.bv"]
                    .iter()
                    .any(|s| name.ends_with(s));
            if name.ends_with("attn.head_bias") {
                m.exempt.push(name.clone());
                continue;
            }
            let src = if is_proj && head_mean_ok {
                TeacherSource::HeadMean {
                    name: name.clone(),
                    heads: teacher_cfg.num_heads,
                }
            } else {
                TeacherSource::Same(name.clone())
            };
            if m.resolve_one(teacher, &src)?.shape() != st.shape() {
                return Err(DtError::Unmapped(name.clone()));
            }
            m.pairs.push((name.clone(), src));
        }
        Ok(m)
    }

    fn resolve_one(&self, teacher: &ParamSet, src: &TeacherSource) -> Result<Tensor, DtError> {
        match src {
            TeacherSource::Same(n) => teacher.get(n).cloned().ok_or_else(|| DtError::Unmapped(n.clone())),
            TeacherSource::HeadMean { name, heads } => {
                let t = teacher.get(name).ok_or_else(|| DtError::Unmapped(name.clone()))?;
                Ok(head_mean(t, *heads))
            }
        }
    }

    /// Teacher targets keyed by student parameter name.
    pub fn targets(&self, teacher: &ParamSet) -> Result<BTreeMap<String, Tensor>, DtError> {
        self.pairs
            .iter()
            .map(|(s, src)| Ok((s.clone(), self.resolve_one(teacher, src)?)))
            .collect()
    }

    /// Errors if any student parameter is neither mapped nor exempt.
    pub fn check_complete(&self, student: &ParamSet) -> Result<(), DtError> {
        for name in student.names() {
            if !self.pairs.iter().any(|(s, _)| s == name) && !self.exempt.contains(name) {
                return Err(DtError::Unmapped(name.clone()));
            }
        }
        Ok(())
    }
}

/// Mean squared difference over all mapped student scalars.
pub fn similarity_loss(teacher: &ParamSet, student: &ParamSet, mapping: &ParamMapping) -> Result<f64, DtError> {
    mapping.check_complete(student)?;
    let targets = mapping.targets(teacher)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (name, t) in &targets {
        let s = student.get(name).ok_or_else(|| DtError::Unmapped(name.clone()))?;
        sum += s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += s.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Differentiable form of [`similarity_loss`] scaled by `weight`.
pub fn similarity_term(g: &mut Graph, b: &mut Binder, targets: &BTreeMap<String, Tensor>, weight: f64) -> Result<Option<Var>, DtError> {
    let n: usize = targets.values().map(|t| t.len()).sum();
    if n == 0 || weight == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (name, t) in targets {
        let v = b.var(g, name)?;
        let ones = vec![1.0; t.rows()];
        let term = g.weighted_sq_err(v, t, &ones)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(Some(g.scale(total.expect("non-empty"), weight / n as f64)?))
}

/// Student with the given trunk configuration, initialized from the
/// teacher through the mapping (head means for shared projections).
pub fn init_student<R: Rng + ?Sized>(teacher: &DtModel, student_trunk: TransformerConfig, rng: &mut R) -> Result<(DtModel, ParamMapping), DtError> {
    let mut config = teacher.config.clone();
    config.transformer = student_trunk;
    config.validate()?;
    let mut params = teacher.params.clone();
    let names: Vec<String> = params.names().filter(|n| n.starts_with(TRUNK)).cloned().collect();
    for n in names {
        params.remove(&n);
    }
    let fresh = transformer::init_params(&config.transformer, TRUNK, rng);
    params.extend(fresh);
    let mapping = ParamMapping::build(&teacher.params, &teacher.config.transformer, &params, &config.transformer)?;
    for (name, t) in mapping.targets(&teacher.params)? {
        *params.get_mut(&name).expect("student param") = t;
    }
    let student = DtModel {
        config,
        scenarios: teacher.scenarios.clone(),
        params,
    };
    Ok((student, mapping))
}

/// Trains a lightweight student on `data` with the action loss plus
/// `beta` times the similarity to the teacher.
pub fn distill(
    teacher: &DtModel,
    student_trunk: TransformerConfig,
    data: &[Trajectory],
    schedule: &Schedule,
    beta: f64,
    seed: u64,
) -> Result<(DtModel, Vec<f64>), DtError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd157_111);
    let (mut student, mapping) = init_student(teacher, student_trunk, &mut rng)?;
    let targets = mapping.targets(&teacher.params)?;
    let extra = |g: &mut Graph, b: &mut Binder| similarity_term(g, b, &targets, beta);
    let curve = train_loop(&mut student, data, schedule, &|_| true, seed, Some(&extra))?;
    Ok((student, curve))
}
