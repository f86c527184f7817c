use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SprintError>;

/// Error taxonomy shared by the library and the CLI.
#[derive(Debug, Error)]
pub enum SprintError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("range error: start {start} > end {end}")]
    Range { start: usize, end: usize },

    #[error("degenerate reference: reference activations have zero norm")]
    DegenerateReference,

    #[error("unsatisfiable latency constraint: tau {tau_ms} ms is below the fixed overhead {overhead_ms} ms")]
    Unsatisfiable { tau_ms: f64, overhead_ms: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SprintError {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SprintError::Unsatisfiable { .. } => 2,
            SprintError::Data(_) | SprintError::Format(_) => 3,
            SprintError::Config(_) | SprintError::Range { .. } => 4,
            SprintError::Measurement(_) => 5,
            SprintError::Dimension(_) | SprintError::DegenerateReference => 6,
            SprintError::Io(_) => 1,
        }
    }
}

impl From<serde_json::Error> for SprintError {
    fn from(e: serde_json::Error) -> Self {
        SprintError::Format(e.to_string())
    }
}
