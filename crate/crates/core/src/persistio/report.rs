//! Structured JSON run reports and the per-epoch trajectory CSV.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::SearchTrajectory;
use crate::error::{Error, Result};
use crate::harness::{CostLedger, FullFinetuneResult, GridResult};
use crate::model::Metrics;
use crate::rankselect::RankDecision;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub trainable: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

/// Everything a run produced, plus the configuration needed to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Subcommand that produced the report.
    pub command: String,
    pub seed: u64,
    /// Flat `key -> value` echo of the effective configuration.
    pub config: serde_json::Map<String, serde_json::Value>,
    pub trajectory: Option<SearchTrajectory>,
    pub decisions: Vec<RankDecision>,
    /// Final rank per LoRA layer, in layer order.
    pub ranks: Vec<usize>,
    pub metrics: ReportMetrics,
    pub grid: Option<GridResult>,
    pub full_finetune: Option<FullFinetuneResult>,
    pub ledger: CostLedger,
    pub parameters: ParameterCounts,
    /// Absent unless timings were requested, so that reports are reproducible byte for byte.
    pub timestamps: Option<Timestamps>,
    /// Fields written by other versions, kept verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RunReport {
    pub fn new(command: impl Into<String>, seed: u64, config: serde_json::Map<String, serde_json::Value>) -> Self {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            seed,
            config,
            trajectory: None,
            decisions: Vec::new(),
            ranks: Vec::new(),
            metrics: ReportMetrics::default(),
            grid: None,
            full_finetune: None,
            ledger: CostLedger::new(),
            parameters: ParameterCounts::default(),
            timestamps: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text).map_err(|e| Error::Format(format!("run report: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// `run.json` -> `run.trajectory.csv`.
pub fn trajectory_csv_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("trajectory.csv")
}

/// Columns: `epoch,train_loss,val_loss,wall_ms`, then `alpha_{layer}_{j}`
/// for every layer and component recorded in the first epoch.
pub fn write_trajectory_csv(trajectory: &SearchTrajectory, path: &Path) -> Result<()> {
    let columns: Vec<(usize, usize)> = trajectory
        .epochs
        .first()
        .map(|e| {
            e.alphas
                .iter()
                .flat_map(|(&layer, a)| (0..a.len()).map(move |j| (layer, j)))
                .collect()
        })
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into(), "wall_ms".into()];
    header.extend(columns.iter().map(|(l, j)| format!("alpha_{l}_{j}")));
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(fmt_err)?;
    for e in &trajectory.epochs {
        let mut row = vec![
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            e.wall_ms.to_string(),
        ];
        for &(l, j) in &columns {
            let a = e
                .alphas
                .get(&l)
                .and_then(|a| a.values().get(j))
                .ok_or_else(|| Error::Format(format!("epoch {} lacks alpha_{l}_{j}", e.epoch)))?;
            row.push(a.to_string());
        }
        w.write_record(&row).map_err(fmt_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    super::write_atomic(path, &bytes)
}

/// Writes the report as JSON and, when it has a trajectory, the CSV next to it.
pub fn emit_report(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    super::write_atomic(path, report.to_json()?.as_bytes())?;
    if let Some(t) = &report.trajectory {
        write_trajectory_csv(t, &trajectory_csv_path(path))?;
    }
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::{EpochRecord, StopReason};
    use crate::lora::AlphaVector;

    fn trajectory(epochs: usize) -> SearchTrajectory {
        SearchTrajectory {
            initial_train_loss: 1.0,
            initial_val_loss: 1.1,
            epochs: (0..epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 0.5 / (e + 1) as f64,
                    val_loss: 0.1 + 1.0 / 3.0,
                    alphas: [(0, AlphaVector::new(vec![0.25, 0.75]).unwrap())].into_iter().collect(),
                    wall_ms: 0.0,
                })
                .collect(),
            stop: StopReason::MaxEpochs,
            grad_evals: 12,
        }
    }

    #[test]
    fn json_round_trip_keeps_unknown_fields() {
        let mut r = RunReport::new("search", 7, serde_json::Map::new());
        r.trajectory = Some(trajectory(2));
        r.ranks = vec![1, 2];
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        v["future_field"] = serde_json::json!({"nested": [1, 2]});
        let text = serde_json::to_string(&v).unwrap();
        let parsed = RunReport::from_json(&text).unwrap();
        assert_eq!(parsed.extra["future_field"]["nested"][1], 2);
        let again: serde_json::Value = serde_json::from_str(&parsed.to_json().unwrap()).unwrap();
        assert_eq!(again, v);
        assert_eq!(parsed.trajectory, r.trajectory);
    }

    #[test]
    fn wrong_schema_version() {
        let mut v = serde_json::to_value(RunReport::new("search", 0, serde_json::Map::new())).unwrap();
        v["schema_version"] = 99.into();
        assert!(RunReport::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn csv_columns_and_empty_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&trajectory(3), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,wall_ms,alpha_0_0,alpha_0_1"));
        assert_eq!(lines.count(), 3);
        let val: f64 = text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(val, 0.1 + 1.0 / 3.0);

        write_trajectory_csv(&trajectory(0), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,train_loss,val_loss,wall_ms\n");
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        let mut r = RunReport::new("search", 1, serde_json::Map::new());
        r.trajectory = Some(trajectory(0));
        emit_report(&r, &p).unwrap();
        assert_eq!(load_report(&p).unwrap(), r);
        assert!(dir.path().join("run.trajectory.csv").exists());
    }
}
