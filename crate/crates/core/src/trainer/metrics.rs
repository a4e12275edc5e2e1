//! Line-delimited JSON metrics: one record per optimization step.

use crate::error::{io, PixproError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub variant: String,
    pub lr: f64,
    pub m: f64,
    pub loss_total: f64,
    pub loss_pix: f64,
    pub loss_inst: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    pub embed_std_mean: f64,
}

pub fn append_line(path: &Path, record: &StepMetrics) -> Result<(), PixproError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    let line = serde_json::to_string(record)
        .map_err(|e| PixproError::Config(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}").map_err(|e| io(path, e))?;
    Ok(())
}

pub fn read_all(path: &Path) -> Result<Vec<StepMetrics>, PixproError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepMetrics = serde_json::from_str(line).map_err(|e| {
            PixproError::Config(format!("metrics line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Drops records at or beyond `resume_step`, so a resumed run appends
/// exactly the lines the uninterrupted run would have written. Surviving
/// lines are kept byte-for-byte (re-serializing would not be guaranteed
/// to reproduce them).
pub fn truncate_from(path: &Path, resume_step: u64) -> Result<(), PixproError> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepMetrics = serde_json::from_str(line).map_err(|e| {
            PixproError::Config(format!("metrics line {}: {e}", i + 1))
        })?;
        if rec.step < resume_step {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| io(path, e))
}
