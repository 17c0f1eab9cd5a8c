//! Error type shared across the crate.
//!
//! Every fallible public operation returns [`Result`]. The CLI maps each
//! variant to a process exit code via [`Error::exit_code`]: 1 for validation
//! problems (bad shapes, bad config, bad input files), 2 for runtime or
//! property failures, 3 for I/O and serialization failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up. Reports both shapes.
    #[error("{op}: dimension mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// The Jacobi sweep limit was exhausted before the off-diagonal mass
    /// dropped below tolerance.
    #[error("svd did not converge after {sweeps} sweeps (worst relative off-diagonal {residual:.3e})")]
    SvdDidNotConverge { sweeps: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss, usually from a too-large
    /// learning rate.
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A CSV input violated the strict dialect. `line` is 1-based, counting
    /// the header as line 1.
    #[error("{path}:{line}: {msg}")]
    CsvParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 runtime, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::InvalidConfig(_)
            | Error::CsvParse { .. } => 1,
            Error::SvdDidNotConverge { .. } | Error::Diverged { .. } => 2,
            Error::CorruptCheckpoint(_) | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}

pub(crate) fn shape_mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        lhs_rows: lhs.0,
        lhs_cols: lhs.1,
        rhs_rows: rhs.0,
        rhs_cols: rhs.1,
    }
}
