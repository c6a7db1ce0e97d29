use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, DtError, HybridAction, Trajectory};
use crate::numerics::{Binder, Graph, ParamSet, Segment, Tensor, Var};
use crate::transformer::{self, DropoutRng, TransformerConfig};

/// Name prefix of the shared transformer trunk.
pub const TRUNK: &str = "trunk.";
const LN_EPS: f64 = 1e-5;
const TRANSPLANT_NEW_INPUT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtConfig {
    pub transformer: TransformerConfig,
    /// Context length `K` in timesteps.
    pub context_len: usize,
    /// Largest timestep with its own embedding row; later steps share it.
    pub max_timestep: usize,
    /// Length of the constraint/configuration part of the prompt.
    pub prompt_features: usize,
    /// Loss weight of slots from non-expert trajectories.
    pub non_expert_weight: f64,
    /// Codebook width shared by every scenario; derived per scenario from
    /// the part count when absent.
    pub code_dim: Option<usize>,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            context_len: 20,
            max_timestep: 100,
            prompt_features: 7,
            non_expert_weight: 0.5,
            code_dim: None,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<(), DtError> {
        self.transformer.validate()?;
        if self.context_len == 0 {
            return Err(DtError::Config("context_len must be at least 1".into()));
        }
        let need = 3 * self.context_len + 1;
        if need > self.transformer.max_sequence_len {
            return Err(DtError::Config(format!(
                "context of {} steps needs {need} tokens but max_sequence_len is {}",
                self.context_len, self.transformer.max_sequence_len
            )));
        }
        if self.code_dim == Some(0) {
            return Err(DtError::Config("code_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Tokens per sequence: prompt plus three per step.
    pub fn sequence_len(&self, steps: usize) -> usize {
        1 + 3 * steps
    }
}

/// Registry entry describing one scenario's adapters and return statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub id: String,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub prompt_features: Vec<f64>,
    /// Returns are divided by this before embedding.
    pub return_scale: f64,
    pub max_return: f64,
    pub min_return: f64,
}

impl ScenarioEntry {
    /// Entry with return statistics taken from `data` (trajectories of this scenario).
    pub fn from_data(
        id: impl Into<String>,
        state_dim: usize,
        action_space: ActionSpace,
        prompt_features: Vec<f64>,
        data: &[&Trajectory],
    ) -> Result<Self, DtError> {
        let id = id.into();
        if data.is_empty() {
            return Err(DtError::EmptyDataset);
        }
        let returns: Vec<f64> = data.iter().map(|t| t.total_return()).collect();
        let max_return = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_return = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Ok(Self {
            id,
            state_dim,
            action_space,
            prompt_features,
            return_scale: if scale > 0.0 { scale } else { 1.0 },
            max_return,
            min_return,
        })
    }

    pub fn code_dim(&self, config: &DtConfig) -> usize {
        config
            .code_dim
            .unwrap_or_else(|| code_dim(config.transformer.model_dim, self.action_space.num_parts()))
    }

    fn action_input_dim(&self, config: &DtConfig) -> usize {
        self.action_space.discrete.len() * self.code_dim(config) + self.action_space.continuous.len()
    }
}

/// Width of each discrete part's codebook: `model_dim / num_parts`, but at
/// least 2 so cyclic categories stay linearly separable.
pub fn code_dim(model_dim: usize, num_parts: usize) -> usize {
    (model_dim / num_parts.max(1)).max(2)
}

/// Index of the codebook row nearest to `y`; ties go to the lowest index.
pub fn nearest_row(y: &[f64], codebook: &Tensor) -> usize {
    let mut best = (0, f64::INFINITY);
    for r in 0..codebook.rows() {
        let d: f64 = codebook.row(r).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (r, d);
        }
    }
    best.0
}

/// Maps hybrid actions to code vectors and back.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionCodec {
    pub codebooks: Vec<Tensor>,
    pub bounds: Vec<(f64, f64)>,
}

impl ActionCodec {
    pub fn new(codebooks: Vec<Tensor>, bounds: Vec<(f64, f64)>) -> Result<Self, DtError> {
        if let Some(first) = codebooks.first() {
            for cb in &codebooks {
                if cb.is_empty() || cb.shape().len() != 2 {
                    return Err(DtError::EmptyCodebook);
                }
                if cb.cols() != first.cols() {
                    return Err(DtError::DimensionMismatch {
                        what: "codebook width",
                        expected: first.cols(),
                        got: cb.cols(),
                    });
                }
            }
        }
        Ok(Self { codebooks, bounds })
    }

    pub fn code_dim(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.cols())
    }

    pub fn vector_len(&self) -> usize {
        self.codebooks.len() * self.code_dim() + self.bounds.len()
    }

    /// Codebook rows of the discrete parts followed by the continuous values.
    pub fn embed(&self, a: &HybridAction) -> Result<Vec<f64>, DtError> {
        if a.discrete.len() != self.codebooks.len() || a.continuous.len() != self.bounds.len() {
            return Err(DtError::DimensionMismatch {
                what: "action parts",
                expected: self.codebooks.len() + self.bounds.len(),
                got: a.discrete.len() + a.continuous.len(),
            });
        }
        let mut v = Vec::with_capacity(self.vector_len());
        for (&i, cb) in a.discrete.iter().zip(&self.codebooks) {
            if i >= cb.rows() {
                return Err(DtError::IllegalAction(a.clone()));
            }
            v.extend_from_slice(cb.row(i));
        }
        v.extend_from_slice(&a.continuous);
        Ok(v)
    }

    /// Nearest codebook row per discrete slice; continuous entries clamped.
    pub fn decode(&self, v: &[f64]) -> Result<HybridAction, DtError> {
        if v.len() != self.vector_len() {
            return Err(DtError::DimensionMismatch {
                what: "action vector",
                expected: self.vector_len(),
                got: v.len(),
            });
        }
        let cd = self.code_dim();
        let discrete = self
            .codebooks
            .iter()
            .enumerate()
            .map(|(p, cb)| nearest_row(&v[p * cd..(p + 1) * cd], cb))
            .collect();
        let off = self.codebooks.len() * cd;
        let continuous = self
            .bounds
            .iter()
            .enumerate()
            .map(|(j, &(lo, hi))| clamp_finite(v[off + j], lo, hi))
            .collect();
        Ok(HybridAction { discrete, continuous })
    }
}

fn clamp_finite(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        lo
    } else {
        x.clamp(lo, hi)
    }
}

/// One token sequence: a prompt then `(R, s, a)` per step. The final
/// action may be missing when the sequence is built for prediction.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub scenario: &'a str,
    pub desired_return: f64,
    pub returns_to_go: &'a [f64],
    pub states: &'a [Vec<f64>],
    pub actions: &'a [HybridAction],
    /// Episode timestep of the first step.
    pub start_time: usize,
}

impl<'a> SeqInput<'a> {
    /// Steps `start..end` of a stored trajectory, prompted with its own return.
    pub fn window(traj: &'a Trajectory, start: usize, end: usize) -> Self {
        Self {
            scenario: &traj.scenario_id,
            desired_return: traj.total_return(),
            returns_to_go: &traj.returns_to_go[start..end],
            states: &traj.states[start..end],
            actions: &traj.actions[start..end],
            start_time: start,
        }
    }

    pub fn steps(&self) -> usize {
        self.states.len()
    }

    pub fn tokens(&self) -> usize {
        1 + 2 * self.steps() + self.actions.len()
    }
}

pub(crate) fn adapter_name(id: &str, rest: &str) -> String {
    format!("adapter.{id}.{rest}")
}

/// Decision transformer: shared trunk and embeddings plus per-scenario adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct DtModel {
    pub config: DtConfig,
    pub scenarios: BTreeMap<String, ScenarioEntry>,
    pub params: ParamSet,
}

impl DtModel {
    pub fn new<R: Rng + ?Sized>(config: DtConfig, rng: &mut R) -> Result<Self, DtError> {
        config.validate()?;
        let d = config.transformer.model_dim;
        let mut params = transformer::init_params(&config.transformer, TRUNK, rng);
        params.insert("embed.return.w", Tensor::randn(&[1, d], 1.0, rng));
        params.insert("embed.return.b", Tensor::zeros(&[d]));
        let pin = 1 + config.prompt_features;
        params.insert("embed.prompt.w", Tensor::randn(&[pin, d], 1.0 / (pin as f64).sqrt(), rng));
        params.insert("embed.prompt.b", Tensor::zeros(&[d]));
        params.insert("embed.time", Tensor::randn(&[config.max_timestep + 2, d], 0.1, rng));
        params.insert("embed.ln.gain", Tensor::full(&[d], 1.0));
        params.insert("embed.ln.bias", Tensor::zeros(&[d]));
        Ok(Self {
            config,
            scenarios: BTreeMap::new(),
            params,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.transformer.model_dim
    }

    pub fn scenario(&self, id: &str) -> Result<&ScenarioEntry, DtError> {
        self.scenarios.get(id).ok_or_else(|| DtError::UnknownScenario(id.to_string()))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn trunk_parameter_count(&self) -> usize {
        self.params.scalar_count_with_prefix(TRUNK)
    }

    fn check_entry(&self, entry: &ScenarioEntry) -> Result<(), DtError> {
        if self.scenarios.contains_key(&entry.id) {
            return Err(DtError::ScenarioExists(entry.id.clone()));
        }
        if entry.prompt_features.len() != self.config.prompt_features {
            return Err(DtError::DimensionMismatch {
                what: "prompt features",
                expected: self.config.prompt_features,
                got: entry.prompt_features.len(),
            });
        }
        if entry.action_space.discrete.iter().any(|&c| c == 0) {
            return Err(DtError::EmptyCodebook);
        }
        if entry.state_dim == 0 || entry.action_space.num_parts() == 0 {
            return Err(DtError::Config(format!("scenario {} has an empty state or action", entry.id)));
        }
        Ok(())
    }

    fn fresh_adapter<R: Rng + ?Sized>(&self, entry: &ScenarioEntry, rng: &mut R) -> ParamSet {
        let d = self.model_dim();
        let cd = entry.code_dim(&self.config);
        let id = &entry.id;
        let mut p = ParamSet::new();
        let sd = entry.state_dim;
        p.insert(adapter_name(id, "state.w"), Tensor::randn(&[sd, d], 1.0 / (sd as f64).sqrt(), rng));
        p.insert(adapter_name(id, "state.b"), Tensor::zeros(&[d]));
        let ad = entry.action_input_dim(&self.config);
        p.insert(adapter_name(id, "action.w"), Tensor::randn(&[ad, d], 1.0 / (ad as f64).sqrt(), rng));
        p.insert(adapter_name(id, "action.b"), Tensor::zeros(&[d]));
        let nd = entry.action_space.discrete.len();
        for (i, &card) in entry.action_space.discrete.iter().enumerate() {
            p.insert(adapter_name(id, &format!("head{i}.w")), Tensor::randn(&[d, cd], 1.0 / (d as f64).sqrt(), rng));
            p.insert(adapter_name(id, &format!("head{i}.b")), Tensor::zeros(&[cd]));
            p.insert(adapter_name(id, &format!("codebook{i}")), Tensor::randn(&[card, cd], 1.0, rng));
        }
        for j in 0..entry.action_space.continuous.len() {
            let fan_in = d + nd * cd + j;
            p.insert(
                adapter_name(id, &format!("cont{j}.w")),
                Tensor::randn(&[fan_in, 1], 1.0 / (fan_in as f64).sqrt(), rng),
            );
            p.insert(adapter_name(id, &format!("cont{j}.b")), Tensor::zeros(&[1]));
        }
        p
    }

    /// Registers a scenario with freshly initialized adapters.
    pub fn add_scenario<R: Rng + ?Sized>(&mut self, entry: ScenarioEntry, rng: &mut R) -> Result<(), DtError> {
        self.check_entry(&entry)?;
        let p = self.fresh_adapter(&entry, rng);
        self.params.extend(p);
        self.scenarios.insert(entry.id.clone(), entry);
        Ok(())
    }

    /// Existing scenario closest in state width and action part count.
    pub fn nearest_scenario(&self, entry: &ScenarioEntry) -> Option<&ScenarioEntry> {
        self.scenarios.values().min_by_key(|s| {
            s.state_dim.abs_diff(entry.state_dim) + s.action_space.num_parts().abs_diff(entry.action_space.num_parts())
        })
    }

    /// Registers a scenario whose adapters start from the nearest existing
    /// one wherever shapes overlap (leading state features, matching action
    /// parts, leading code columns); the rest is random. Returns the donor id.
    pub fn add_scenario_from_nearest<R: Rng + ?Sized>(
        &mut self,
        entry: ScenarioEntry,
        rng: &mut R,
    ) -> Result<Option<String>, DtError> {
        self.check_entry(&entry)?;
        let mut fresh = self.fresh_adapter(&entry, rng);
        let donor = self.nearest_scenario(&entry).cloned();
        if let Some(src) = &donor {
            self.transplant(src, &entry, &mut fresh);
        }
        self.params.extend(fresh);
        self.scenarios.insert(entry.id.clone(), entry);
        Ok(donor.map(|s| s.id))
    }

    fn transplant(&self, src: &ScenarioEntry, dst: &ScenarioEntry, fresh: &mut ParamSet) {
        let d = self.model_dim();
        let get = |rest: &str| self.params.get(&adapter_name(&src.id, rest)).expect("donor adapter");
        // inputs the donor never saw start near zero so they do not disturb the trunk
        for rest in ["state.w", "action.w"] {
            let t = fresh.get_mut(&adapter_name(&dst.id, rest)).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x *= TRANSPLANT_NEW_INPUT_SCALE);
        }
        for rest in ["state.w", "state.b", "action.b"] {
            copy_overlap(fresh.get_mut(&adapter_name(&dst.id, rest)).unwrap(), get(rest));
        }
        let (cs, cd) = (src.code_dim(&self.config), dst.code_dim(&self.config));
        let (nds, ndd) = (src.action_space.discrete.len(), dst.action_space.discrete.len());
        let same_part = |i: usize| i < nds && src.action_space.discrete[i] == dst.action_space.discrete[i];
        let mut row_pairs = Vec::new();
        for i in (0..ndd).filter(|&i| same_part(i)) {
            for c in 0..cs.min(cd) {
                row_pairs.push((i * cd + c, i * cs + c));
            }
            for rest in [format!("head{i}.w"), format!("head{i}.b"), format!("codebook{i}")] {
                copy_overlap(fresh.get_mut(&adapter_name(&dst.id, &rest)).unwrap(), get(&rest));
            }
        }
        let (ncs, ncd) = (src.action_space.continuous.len(), dst.action_space.continuous.len());
        for j in 0..ncs.min(ncd) {
            row_pairs.push((ndd * cd + j, nds * cs + j));
            for rest in [format!("cont{j}.w"), format!("cont{j}.b")] {
                let t = fresh.get_mut(&adapter_name(&dst.id, &rest)).unwrap();
                if t.shape() == get(&rest).shape() {
                    *t = get(&rest).clone();
                }
            }
        }
        let aw = fresh.get_mut(&adapter_name(&dst.id, "action.w")).unwrap();
        let src_aw = get("action.w");
        for (to, from) in row_pairs {
            let row = src_aw.row(from).to_vec();
            aw.data_mut()[to * d..(to + 1) * d].copy_from_slice(&row);
        }
    }

    /// Current codebooks and bounds of a scenario.
    pub fn codec(&self, id: &str) -> Result<ActionCodec, DtError> {
        let e = self.scenario(id)?;
        let codebooks = (0..e.action_space.discrete.len())
            .map(|i| self.param(&adapter_name(id, &format!("codebook{i}"))).cloned())
            .collect::<Result<_, _>>()?;
        ActionCodec::new(codebooks, e.action_space.continuous.clone())
    }

    fn param(&self, name: &str) -> Result<&Tensor, DtError> {
        self.params
            .get(name)
            .ok_or_else(|| DtError::Numerics(crate::numerics::NumericsError::MissingParam(name.to_string())))
    }

    /// Embeds, interleaves and runs the trunk over a batch of sequences.
    /// Returns the trunk output and, per sequence, the row of each state token.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        seqs: &[SeqInput],
        rng: DropoutRng,
    ) -> Result<(Var, Vec<Vec<usize>>), DtError> {
        if seqs.is_empty() {
            return Err(DtError::EmptyDataset);
        }
        let d = self.model_dim();
        let pf = self.config.prompt_features;
        let mut pieces = Vec::new();
        let mut offset = 0;

        // prompts
        let mut prompt = Vec::with_capacity(seqs.len() * (pf + 1));
        for s in seqs {
            let e = self.scenario(s.scenario)?;
            if s.steps() == 0 {
                return Err(DtError::EmptyTrajectory);
            }
            if s.actions.len() != s.steps() && s.actions.len() + 1 != s.steps() {
                return Err(DtError::LengthMismatch {
                    states: s.steps(),
                    actions: s.actions.len(),
                    rewards: s.returns_to_go.len(),
                });
            }
            if s.returns_to_go.len() != s.steps() {
                return Err(DtError::LengthMismatch {
                    states: s.steps(),
                    actions: s.actions.len(),
                    rewards: s.returns_to_go.len(),
                });
            }
            prompt.push(s.desired_return / e.return_scale);
            prompt.extend_from_slice(&e.prompt_features);
        }
        let pv = g.constant(Tensor::matrix(seqs.len(), pf + 1, prompt)?);
        pieces.push(linear(g, b, pv, "embed.prompt.w", "embed.prompt.b")?);
        let prompt_row: Vec<usize> = (0..seqs.len()).collect();
        offset += seqs.len();

        // returns-to-go
        let mut rtg = Vec::new();
        let mut rtg_row = Vec::with_capacity(seqs.len());
        for s in seqs {
            let scale = self.scenario(s.scenario)?.return_scale;
            rtg_row.push(offset + rtg.len());
            rtg.extend(s.returns_to_go.iter().map(|r| r / scale));
        }
        let n_rtg = rtg.len();
        let rv = g.constant(Tensor::matrix(n_rtg, 1, rtg)?);
        pieces.push(linear(g, b, rv, "embed.return.w", "embed.return.b")?);
        offset += n_rtg;

        // states and actions, grouped by scenario
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            groups.entry(s.scenario).or_default().push(i);
        }
        let mut state_row: Vec<Vec<usize>> = seqs.iter().map(|s| vec![0; s.steps()]).collect();
        let mut action_row: Vec<Vec<usize>> = seqs.iter().map(|s| vec![0; s.actions.len()]).collect();
        for (&id, members) in &groups {
            let e = self.scenario(id)?;
            let mut rows = Vec::new();
            let mut n = 0;
            for &i in members {
                for (t, st) in seqs[i].states.iter().enumerate() {
                    if st.len() != e.state_dim {
                        return Err(DtError::DimensionMismatch {
                            what: "state",
                            expected: e.state_dim,
                            got: st.len(),
                        });
                    }
                    rows.extend_from_slice(st);
                    state_row[i][t] = offset + n;
                    n += 1;
                }
            }
            let sv = g.constant(Tensor::matrix(n, e.state_dim, rows)?);
            let sw = adapter_name(id, "state.w");
            let sb = adapter_name(id, "state.b");
            pieces.push(linear(g, b, sv, &sw, &sb)?);
            offset += n;

            let acts: Vec<&HybridAction> = members.iter().flat_map(|&i| seqs[i].actions.iter()).collect();
            if acts.is_empty() {
                continue;
            }
            let mut k = 0;
            for &i in members {
                for t in 0..seqs[i].actions.len() {
                    action_row[i][t] = offset + k;
                    k += 1;
                }
            }
            let code = self.action_code(g, b, e, &acts)?;
            let aw = adapter_name(id, "action.w");
            let ab = adapter_name(id, "action.b");
            pieces.push(linear(g, b, code, &aw, &ab)?);
            offset += acts.len();
        }
        let all = g.concat_rows(&pieces)?;

        // interleave into sequence order
        let mut perm = Vec::with_capacity(offset);
        let mut times = Vec::with_capacity(offset);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut s_rows = Vec::with_capacity(seqs.len());
        let prompt_slot = self.config.max_timestep + 1;
        for (i, s) in seqs.iter().enumerate() {
            let start = perm.len();
            perm.push(prompt_row[i]);
            times.push(prompt_slot);
            let mut rows = Vec::with_capacity(s.steps());
            for t in 0..s.steps() {
                let ts = (s.start_time + t).min(self.config.max_timestep);
                perm.push(rtg_row[i] + t);
                perm.push(state_row[i][t]);
                rows.push(perm.len() - 1);
                times.extend([ts, ts]);
                if t < s.actions.len() {
                    perm.push(action_row[i][t]);
                    times.push(ts);
                }
            }
            segments.push(Segment::new(start, perm.len() - start));
            s_rows.push(rows);
        }
        let x = g.gather_rows(all, &perm)?;
        let tt = b.var(g, "embed.time")?;
        let te = g.gather_rows(tt, &times)?;
        let x = g.add(x, te)?;
        let (lg, lb) = (b.var(g, "embed.ln.gain")?, b.var(g, "embed.ln.bias")?);
        let x = g.layer_norm(x, lg, lb, LN_EPS)?;
        debug_assert_eq!(g.value(x).cols(), d);
        let h = transformer::forward(g, b, &self.config.transformer, TRUNK, x, &segments, rng)?;
        Ok((h, s_rows))
    }

    /// Code vectors `[codebook rows | continuous values]` of `acts`.
    fn action_code(&self, g: &mut Graph, b: &mut Binder, e: &ScenarioEntry, acts: &[&HybridAction]) -> Result<Var, DtError> {
        let mut cols = Vec::new();
        for i in 0..e.action_space.discrete.len() {
            let cb = b.var(g, &adapter_name(&e.id, &format!("codebook{i}")))?;
            let idx: Vec<usize> = acts.iter().map(|a| a.discrete[i]).collect();
            cols.push(g.gather_rows(cb, &idx)?);
        }
        let nc = e.action_space.continuous.len();
        if nc > 0 {
            let vals: Vec<f64> = acts.iter().flat_map(|a| a.continuous.iter().copied()).collect();
            cols.push(g.constant(Tensor::matrix(acts.len(), nc, vals)?));
        }
        Ok(if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols)? })
    }

    /// Per-part code predictions `y_i = h W_i + b_i` for state-token outputs `h`.
    fn code_heads(&self, g: &mut Graph, b: &mut Binder, e: &ScenarioEntry, h: Var) -> Result<Vec<Var>, DtError> {
        (0..e.action_space.discrete.len())
            .map(|i| {
                let w = adapter_name(&e.id, &format!("head{i}.w"));
                let bb = adapter_name(&e.id, &format!("head{i}.b"));
                linear(g, b, h, &w, &bb)
            })
            .collect()
    }

    /// Continuous head `j` fed with the hidden state, the codebook rows of
    /// the discrete parts and the earlier continuous values.
    fn cont_head(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        e: &ScenarioEntry,
        j: usize,
        h: Var,
        discrete_rows: &[Var],
        earlier: Option<Var>,
    ) -> Result<Var, DtError> {
        let mut parts = vec![h];
        parts.extend_from_slice(discrete_rows);
        parts.extend(earlier);
        let x = g.concat_cols(&parts)?;
        let w = adapter_name(&e.id, &format!("cont{j}.w"));
        let bb = adapter_name(&e.id, &format!("cont{j}.b"));
        linear(g, b, x, &w, &bb)
    }

    /// Weighted mean over action slots of summed per-part cross-entropy and
    /// squared error.
    pub fn loss(&self, g: &mut Graph, b: &mut Binder, windows: &[(&Trajectory, usize, usize)], rng: DropoutRng) -> Result<Var, DtError> {
        let seqs: Vec<SeqInput> = windows.iter().map(|&(t, s, e)| SeqInput::window(t, s, e)).collect();
        let (h, s_rows) = self.encode(g, b, &seqs, rng)?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            groups.entry(s.scenario).or_default().push(i);
        }
        let mut total: Option<Var> = None;
        let mut weight_sum = 0.0;
        for (&id, members) in &groups {
            let e = self.scenario(id)?;
            let mut rows = Vec::new();
            let mut targets: Vec<&HybridAction> = Vec::new();
            let mut weights = Vec::new();
            for &i in members {
                let w = if windows[i].0.expert { 1.0 } else { self.config.non_expert_weight };
                rows.extend_from_slice(&s_rows[i]);
                targets.extend(seqs[i].actions.iter());
                weights.extend(std::iter::repeat(w).take(s_rows[i].len()));
            }
            weight_sum += weights.iter().sum::<f64>();
            let hs = g.gather_rows(h, &rows)?;
            let ys = self.code_heads(g, b, e, hs)?;
            let mut terms = Vec::new();
            let mut target_rows = Vec::new();
            for (i, y) in ys.into_iter().enumerate() {
                let cb = b.var(g, &adapter_name(id, &format!("codebook{i}")))?;
                let logits = g.neg_sq_dist(y, cb)?;
                let tgt: Vec<usize> = targets.iter().map(|a| a.discrete[i]).collect();
                terms.push(g.cross_entropy(logits, &tgt, &weights)?);
                if !e.action_space.continuous.is_empty() {
                    target_rows.push(g.gather_rows(cb, &tgt)?);
                }
            }
            let nc = e.action_space.continuous.len();
            let mut earlier: Option<Var> = None;
            for j in 0..nc {
                let pred = self.cont_head(g, b, e, j, hs, &target_rows, earlier)?;
                let tv: Vec<f64> = targets.iter().map(|a| a.continuous[j]).collect();
                let tt = Tensor::matrix(tv.len(), 1, tv)?;
                terms.push(g.weighted_sq_err(pred, &tt, &weights)?);
                let vals: Vec<f64> = targets.iter().flat_map(|a| a.continuous[..=j].iter().copied()).collect();
                earlier = Some(g.constant(Tensor::matrix(targets.len(), j + 1, vals)?));
            }
            for t in terms {
                total = Some(match total {
                    Some(acc) => g.add(acc, t)?,
                    None => t,
                });
            }
        }
        let total = total.ok_or(DtError::EmptyDataset)?;
        if !(weight_sum > 0.0) {
            return Err(DtError::EmptyDataset);
        }
        let loss = g.scale(total, 1.0 / weight_sum)?;
        if !g.value(loss).is_finite() {
            return Err(DtError::NonFinite("loss"));
        }
        Ok(loss)
    }

    /// Decodes the action for the last state of `seq` in inference mode.
    pub fn predict(&self, seq: &SeqInput) -> Result<HybridAction, DtError> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let (h, s_rows) = self.encode(&mut g, &mut b, std::slice::from_ref(seq), None)?;
        let last = *s_rows[0].last().expect("non-empty sequence");
        let e = self.scenario(seq.scenario)?;
        let hs = g.gather_rows(h, &[last])?;
        let ys = self.code_heads(&mut g, &mut b, e, hs)?;
        let mut discrete = Vec::with_capacity(ys.len());
        let mut rows = Vec::new();
        for (i, y) in ys.into_iter().enumerate() {
            let name = adapter_name(&e.id, &format!("codebook{i}"));
            let k = nearest_row(g.value(y).data(), self.param(&name)?);
            discrete.push(k);
            if !e.action_space.continuous.is_empty() {
                let cb = b.var(&mut g, &name)?;
                rows.push(g.gather_rows(cb, &[k])?);
            }
        }
        let mut continuous = Vec::with_capacity(e.action_space.continuous.len());
        for (j, &(lo, hi)) in e.action_space.continuous.iter().enumerate() {
            let earlier = (j > 0).then(|| g.constant(Tensor::vector(continuous.clone()).reshape(vec![1, j]).expect("row")));
            let pred = self.cont_head(&mut g, &mut b, e, j, hs, &rows, earlier)?;
            continuous.push(clamp_finite(g.value(pred).item(), lo, hi));
        }
        Ok(HybridAction { discrete, continuous })
    }
}

fn linear(g: &mut Graph, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var, DtError> {
    let wv = b.var(g, w)?;
    let bv = b.var(g, bias)?;
    let h = g.matmul(x, wv)?;
    Ok(g.add_row(h, bv)?)
}

/// Copies the overlapping leading block of `src` into `dst`.
fn copy_overlap(dst: &mut Tensor, src: &Tensor) {
    let (dr, dc) = (dst.rows(), dst.cols());
    let (sr, sc) = (src.rows(), src.cols());
    let (r, c) = (dr.min(sr), dc.min(sc));
    for i in 0..r {
        dst.data_mut()[i * dc..i * dc + c].copy_from_slice(&src.row(i)[..c]);
    }
}
