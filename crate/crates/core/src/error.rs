use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("architecture line {line}: {message}")]
    Arch { line: usize, message: String },

    #[error("layer {prev} output {prev_out} \u{2260} layer {next} input {next_in}")]
    LayerMismatch {
        prev: usize,
        prev_out: usize,
        next: usize,
        next_in: usize,
    },

    #[error("policy error: {0}")]
    Policy(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("privacy error: {0}")]
    Privacy(String),

    #[error("privacy budget exhausted: epsilon {spent:.4} would exceed target {target:.4}")]
    BudgetExhausted { spent: f64, target: f64 },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        Error::Epoch {
            epoch,
            source: Box::new(self),
        }
    }
}
