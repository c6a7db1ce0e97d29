use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dt::{HybridAction, Trajectory};
use crate::env::{Scenario, Task};

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "dtwireless-dataset";

/// Trajectories of one task plus the registry of scenarios they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub task: Task,
    pub scenarios: Vec<Scenario>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task: Task,
    scenarios: Vec<Scenario>,
    records: usize,
}

/// Matrices are stored row-major with their widths.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scenario_id: String,
    expert: bool,
    steps: usize,
    state_dim: usize,
    states: Vec<f64>,
    discrete_dim: usize,
    discrete: Vec<usize>,
    continuous_dim: usize,
    continuous: Vec<f64>,
    rewards: Vec<f64>,
}

impl Record {
    fn from_trajectory(t: &Trajectory) -> Self {
        let width = |v: Option<usize>| v.unwrap_or(0);
        Self {
            scenario_id: t.scenario_id.clone(),
            expert: t.expert,
            steps: t.len(),
            state_dim: width(t.states.first().map(Vec::len)),
            states: t.states.concat(),
            discrete_dim: width(t.actions.first().map(|a| a.discrete.len())),
            discrete: t.actions.iter().flat_map(|a| a.discrete.iter().copied()).collect(),
            continuous_dim: width(t.actions.first().map(|a| a.continuous.len())),
            continuous: t.actions.iter().flat_map(|a| a.continuous.iter().copied()).collect(),
            rewards: t.rewards.clone(),
        }
    }

    fn into_trajectory(self) -> Result<Trajectory, String> {
        let n = self.steps;
        if self.rewards.len() != n {
            return Err(format!("{} rewards for {n} steps", self.rewards.len()));
        }
        for (what, len, dim) in [
            ("states", self.states.len(), self.state_dim),
            ("discrete actions", self.discrete.len(), self.discrete_dim),
            ("continuous actions", self.continuous.len(), self.continuous_dim),
        ] {
            if len != n * dim {
                return Err(format!("{what} hold {len} values, expected {n} x {dim}"));
            }
        }
        let rows = |v: &[f64], d: usize| -> Vec<Vec<f64>> { (0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect() };
        let actions = (0..n)
            .map(|i| HybridAction {
                discrete: self.discrete[i * self.discrete_dim..(i + 1) * self.discrete_dim].to_vec(),
                continuous: self.continuous[i * self.continuous_dim..(i + 1) * self.continuous_dim].to_vec(),
            })
            .collect();
        // returns-to-go are never stored; the constructor rebuilds them
        Trajectory::new(self.scenario_id, rows(&self.states, self.state_dim), actions, self.rewards, self.expert)
            .map_err(|e| e.to_string())
    }
}

impl DatasetFile {
    pub fn new(task: Task, scenarios: Vec<Scenario>, trajectories: Vec<Trajectory>) -> Result<Self, PipelineError> {
        let ds = Self {
            task,
            scenarios,
            trajectories,
        };
        ds.check_registry()?;
        Ok(ds)
    }

    fn check_registry(&self) -> Result<(), PipelineError> {
        for (index, t) in self.trajectories.iter().enumerate() {
            if !self.scenarios.iter().any(|s| s.id == t.scenario_id) {
                return Err(PipelineError::Record {
                    index,
                    message: format!("scenario `{}` is not in the registry", t.scenario_id),
                });
            }
        }
        Ok(())
    }

    /// Trajectories grouped by scenario id.
    pub fn by_scenario(&self) -> BTreeMap<&str, Vec<&Trajectory>> {
        let mut out: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
        for t in &self.trajectories {
            out.entry(t.scenario_id.as_str()).or_default().push(t);
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), PipelineError> {
        let header = Header {
            format: FORMAT.into(),
            version: DATASET_VERSION,
            task: self.task,
            scenarios: self.scenarios.clone(),
            records: self.trajectories.len(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut *w, &Record::from_trajectory(t))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, PipelineError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| PipelineError::Header("empty file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| PipelineError::Header(e.to_string()))?;
        if header.format != FORMAT {
            return Err(PipelineError::Header(format!("unknown format `{}`", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(PipelineError::DatasetVersion(header.version));
        }
        let mut trajectories = Vec::new();
        for (index, line) in lines.enumerate() {
            let line = line?;
            let record: Record = serde_json::from_str(&line).map_err(|e| PipelineError::Record {
                index,
                message: e.to_string(),
            })?;
            let t = record
                .into_trajectory()
                .map_err(|message| PipelineError::Record { index, message })?;
            trajectories.push(t);
        }
        if trajectories.len() != header.records {
            return Err(PipelineError::Record {
                index: trajectories.len(),
                message: format!("file ends after {} of {} records", trajectories.len(), header.records),
            });
        }
        Self::new(header.task, header.scenarios, trajectories)
    }
}

pub fn save_dataset(path: &Path, dataset: &DatasetFile) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    dataset.write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, PipelineError> {
    DatasetFile::read(BufReader::new(File::open(path)?))
}
