//! Line-delimited JSON logs and the run manifest.

use std::path::Path;

use mtnlu_core::engine::{MetricReport, StepRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// One metric of one task after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: usize,
    pub epoch: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub loss: f64,
    pub n: usize,
}

pub fn metric_records(report: &MetricReport) -> Vec<MetricRecord> {
    report
        .metrics
        .iter()
        .map(|(metric, value)| MetricRecord {
            stage: report.stage,
            epoch: report.epoch,
            task: report.task.clone(),
            metric: metric.clone(),
            value: *value,
            loss: report.loss,
            n: report.n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub task: String,
    pub task_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

impl From<&StepRecord> for StepLine {
    fn from(r: &StepRecord) -> Self {
        Self {
            stage: r.stage,
            epoch: r.epoch,
            step: r.step,
            task: r.task.clone(),
            task_loss: r.loss.task,
            adv: r.loss.adv,
            kd: r.loss.kd,
            total: r.loss.total,
            grad_norm: r.loss.grad_norm,
        }
    }
}

pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = crate::error::read_to_string(path, CliError::Data)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::data(format!("{}, line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// What a run read and wrote; enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved plan document, defaults expanded.
    pub plan: String,
    /// Resolved task document, defaults expanded.
    pub tasks: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub vocab: FileHash,
    pub checkpoints: Vec<String>,
    pub metric_log: String,
    pub step_log: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, serde_json::to_string_pretty(self).expect("manifest serializes"))
    }
}
