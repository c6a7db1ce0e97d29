use std::path::Path;

use serde::Serialize;

use super::PipelineError;

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub phase: String,
    pub scenario_id: String,
    /// Environment steps or optimizer steps, depending on the phase.
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    phase: &'a str,
    scenario_id: &'a str,
    step: usize,
    mean_return: f64,
    std_return: f64,
}

#[derive(Serialize)]
struct WallRow<'a> {
    phase: &'a str,
    scenario_id: &'a str,
    step: usize,
    wall_seconds: f64,
}

/// Append-only table whose step column never decreases within a
/// (phase, scenario) series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<(), PipelineError> {
        let last = self
            .rows
            .iter()
            .rev()
            .find(|r| r.phase == row.phase && r.scenario_id == row.scenario_id);
        if let Some(prev) = last {
            if row.step < prev.step {
                return Err(PipelineError::Metrics(format!(
                    "step {} after {} in {}/{}",
                    row.step, prev.step, row.phase, row.scenario_id
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Writes the deterministic columns to `path` and wall-clock times to a
    /// sidecar next to it, so reruns compare byte for byte.
    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = csv_writer(path, &["phase", "scenario_id", "step", "mean_return", "std_return"])?;
        for r in &self.rows {
            w.serialize(CsvRow {
                phase: &r.phase,
                scenario_id: &r.scenario_id,
                step: r.step,
                mean_return: r.mean_return,
                std_return: r.std_return,
            })?;
        }
        w.flush()?;
        let mut w = csv_writer(&wall_path(path), &["phase", "scenario_id", "step", "wall_seconds"])?;
        for r in &self.rows {
            w.serialize(WallRow {
                phase: &r.phase,
                scenario_id: &r.scenario_id,
                step: r.step,
                wall_seconds: r.wall_seconds,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `metrics.csv` -> `metrics.wall.csv`.
pub fn wall_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    path.with_file_name(format!("{stem}.wall.csv"))
}

/// CSV writer that emits `header` even when no rows follow.
pub fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>, PipelineError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}
