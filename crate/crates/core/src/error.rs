use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular lift: variable {variable} is zero at time index {time}")]
    SingularLift { variable: usize, time: usize },

    #[error("degenerate variable {variable}: centered data is identically zero")]
    DegenerateVariable { variable: usize },

    #[error("collective contract violated: {0}")]
    Collective(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("spectrum is identically zero")]
    ZeroSpectrum,

    #[error(
        "underdetermined regression: {columns} operator columns but only {rows} data rows \
         (largest admissible r is {max_r})"
    )]
    Underdetermined {
        columns: usize,
        rows: usize,
        max_r: usize,
    },

    #[error("regularized normal matrix is singular; use a positive regularization")]
    SingularSystem,

    #[error("no feasible regularization pair (best infeasible error {best_error:e})")]
    NoFeasiblePair { best_error: f64 },

    #[error("time step {dt:e} violates stability limits (admissible dt <= {max_dt:e})")]
    CflViolation { dt: f64, max_dt: f64 },

    #[error("generator failed: {0}")]
    Generator(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::InvalidPartition(_) => 2,
            Error::Io { .. } | Error::CorruptDataset(_) | Error::Format(_) | Error::Transport(_) => 4,
            _ => 3,
        }
    }
}
