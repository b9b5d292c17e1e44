use thiserror::Error;

use crate::act::EpochRecord;

pub type Result<T, E = ActError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ActError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("graph error at node {node}: {msg}")]
    Graph { node: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Class indices are reported 1-based, matching the file formats.
    #[error("class {} has no samples", .0 + 1)]
    EmptyClass(usize),

    #[error("representation dimension {dimension} has zero variance across the batch")]
    ZeroVariance { dimension: usize },

    #[error("training produced a non-finite loss at epoch {epoch}: {record:?}")]
    Diverged { epoch: usize, record: EpochRecord },

    /// `line` is 1-based; 0 means the error is not tied to a single line.
    #[error("config{}: {msg}", if *.line == 0 { String::new() } else { format!(" line {}", .line) })]
    Config { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
