use std::io;

/// Errors produced by the detector library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("value outside the constellation: {0}")]
    Domain(String),

    #[error("degenerate channel: column {column} has zero norm")]
    DegenerateChannel { column: usize },

    #[error("singular matrix in linear solve")]
    SingularMatrix,

    #[error("tape error: {0}")]
    Tape(String),

    #[error("model file schema error: {0}")]
    Schema(String),

    #[error("parameter invariant violated: {0}")]
    Invariant(String),

    #[error("modulation mismatch: model is {model}, run is {run}")]
    ModeMismatch { model: String, run: String },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize, history: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for the command-line tool: 2 for configuration
    /// and input problems, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::SingularMatrix | Error::DegenerateChannel { .. } => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}
