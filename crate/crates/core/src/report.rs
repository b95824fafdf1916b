//! Run reports: everything a stream run produces — forward/backward
//! matrices, merge history, risk trace, checkpoint references — as one
//! self-contained serializable document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricsMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeEvent {
    /// Stream position t at which the merge happened.
    pub step: usize,
    /// Number of adapter deltas in the average (all trained so far).
    pub adapters_averaged: usize,
    /// Sparsity of the averaged delta at the absolute 1e-3 threshold.
    pub sparsity: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskPoint {
    pub snapshot: String,
    pub datasets_seen: usize,
    pub cumulative_nll: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub snapshot: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub dataset: String,
    pub epoch_losses: Vec<f64>,
    pub heldout_errors: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub suite_fingerprint: String,
    pub master_seed: u64,
    /// Echo of the schedule/config the method ran with.
    pub schedule: serde_json::Value,
    pub forward: MetricsMatrix,
    pub backward: MetricsMatrix,
    pub base_row: String,
    pub final_row: String,
    pub merge_history: Vec<MergeEvent>,
    /// (dataset id, composed-delta sparsity at eps 1e-3) per trained adapter.
    pub adapter_sparsity: Vec<(String, f64)>,
    pub risk_trace: Vec<RiskPoint>,
    pub checkpoints: Vec<CheckpointRef>,
    pub training: Vec<TrainLog>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(
        method: &str,
        suite_fingerprint: &str,
        master_seed: u64,
        schedule: serde_json::Value,
        forward_cols: Vec<String>,
        backward_cols: Vec<String>,
    ) -> RunReport {
        RunReport {
            method: method.to_string(),
            suite_fingerprint: suite_fingerprint.to_string(),
            master_seed,
            schedule,
            forward: MetricsMatrix::new(forward_cols),
            backward: MetricsMatrix::new(backward_cols),
            base_row: "base".into(),
            final_row: "base".into(),
            merge_history: Vec::new(),
            adapter_sparsity: Vec::new(),
            risk_trace: Vec::new(),
            checkpoints: Vec::new(),
            training: Vec::new(),
            notes: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn scores(&self) -> Result<crate::eval::TransferScores> {
        crate::eval::transfer_scores(&self.forward, &self.backward, &self.base_row, &self.final_row)
    }
}

/// Write report.json plus flat forward/backward/history tables.
pub fn save_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    crate::io::write_text(&dir.join("report.json"), &format!("{json}\n"))?;
    crate::io::write_matrix_csv(&dir.join("forward.csv"), &report.forward)?;
    crate::io::write_matrix_csv(&dir.join("backward.csv"), &report.backward)?;

    let mut hist = String::from("step,adapters_averaged,sparsity,delta_norm\n");
    for e in &report.merge_history {
        hist.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            e.step, e.adapters_averaged, e.sparsity, e.delta_norm
        ));
    }
    let mut sp = String::from("dataset,sparsity\n");
    for (ds, s) in &report.adapter_sparsity {
        sp.push_str(&format!("{ds},{s:.6}\n"));
    }
    crate::io::write_text(&dir.join("history.csv"), &hist)?;
    crate::io::write_text(&dir.join("adapter_sparsity.csv"), &sp)?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}
