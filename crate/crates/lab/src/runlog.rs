//! JSON-lines trial log: one record per completed trial, append-only,
//! resumable by `(config_hash, seed)`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::LabError;

/// One trial's persisted outcome. `final_loss` is `None` for diverged
/// trials (the in-memory sentinel is +inf, which JSON cannot carry).
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct TrialRecord {
    pub config_hash: String,
    pub axis: String,
    pub axis_point: u64,
    pub hps: BTreeMap<String, f64>,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub trace_path: String,
}

impl TrialRecord {
    pub fn key(&self) -> (String, u64) {
        (self.config_hash.clone(), self.seed)
    }

    pub fn loss_or_inf(&self) -> f64 {
        if self.diverged {
            f64::INFINITY
        } else {
            self.final_loss.unwrap_or(f64::INFINITY)
        }
    }
}

/// Append-only single-writer log.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn at(path: impl Into<PathBuf>) -> Self {
        RunLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Load all records; an absent file is an empty log.
    pub fn load(&self) -> Result<Vec<TrialRecord>, LabError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let file = fs::File::open(&self.path)?;
        let mut out = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TrialRecord = serde_json::from_str(&line).map_err(|e| {
                LabError::Runtime(format!(
                    "corrupt trial log {} line {}: {e}",
                    self.path.display(),
                    lineno + 1
                ))
            })?;
            out.push(record);
        }
        Ok(out)
    }

    /// Keys already present (for resume).
    pub fn existing_keys(&self) -> Result<BTreeSet<(String, u64)>, LabError> {
        Ok(self.load()?.into_iter().map(|r| r.key()).collect())
    }

    pub fn append(&self, record: &TrialRecord) -> Result<(), LabError> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(record)
            .map_err(|e| LabError::Runtime(format!("record serialization failed: {e}")))?;
        writeln!(file, "{line}")?;
        Ok(())
    }
}

/// Write a loss trace as `step,loss` CSV; deterministic bytes.
pub fn write_trace(path: &Path, trace: &[f64]) -> Result<(), LabError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::from("step,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}
