//! Experiment harness around the core library: TOML configs, a
//! JSON-lines trial log with resume, a bounded worker pool, CSV/SVG
//! reports, weight snapshots, and the command-line entry points.

pub mod config;
pub mod pool;
pub mod report;
pub mod runlog;
pub mod snapshot;
pub mod sweep;
pub mod tpjson;

use thiserror::Error;

/// Harness-level failures, mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum LabError {
    /// Bad configuration: exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// A verdict-style check failed: exit code 1.
    #[error("verdict failed: {0}")]
    VerdictFail(String),
    /// Unrecoverable runtime problem: exit code 3.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl LabError {
    pub fn from_core(e: mupdit_core::Error) -> Self {
        match e {
            mupdit_core::Error::Config(m) | mupdit_core::Error::Usage(m) => LabError::Config(m),
            mupdit_core::Error::Shape(m) | mupdit_core::Error::Numeric(m) => LabError::Runtime(m),
            mupdit_core::Error::Diverged(m) => LabError::Runtime(m),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::VerdictFail(_) => 1,
            LabError::Config(_) => 2,
            LabError::Runtime(_) => 3,
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Runtime(format!("io error: {e}"))
    }
}

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(bits: u8) -> Result<Self, LabError> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(LabError::Config(format!("precision must be 32 or 64, got {other}"))),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}
