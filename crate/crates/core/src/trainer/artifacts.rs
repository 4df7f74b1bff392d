//! Files written by runs: metrics, confusion matrices, checkpoints and the
//! resolved configuration. Every write goes to a temporary sibling first and
//! is renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::net::{decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointError};

use super::TrainError;

pub const METRICS_HEADER: &str = "epoch,stage,split,accuracy,mean_reward,mean_logp,wall_seconds";
pub const SWEEP_HEADER: &str = "f,T,stage1_best_acc,stage2_best_acc";
pub const RESOLVED_CONFIG: &str = "config.resolved";

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| TrainError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: String,
    pub split: String,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_logp: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.stage,
            self.split,
            self.accuracy,
            self.mean_reward,
            self.mean_logp,
            self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            stage: f[1].to_string(),
            split: f[2].to_string(),
            accuracy: f[3].parse().ok()?,
            mean_reward: f[4].parse().ok()?,
            mean_logp: f[5].parse().ok()?,
            wall_seconds: f[6].parse().ok()?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    Ok(text.lines().skip(1).filter_map(MetricsRow::parse).collect())
}

pub fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let mut out = String::from("label");
    for k in 0..confusion.len() {
        let _ = write!(out, ",pred_{k}");
    }
    out.push('\n');
    for (label, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{label}");
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    atomic_write(path, &encode_checkpoint(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes =
        fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

pub fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> Result<(), TrainError> {
    atomic_write(&dir.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())
}
