//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("arithmetic error: {0}")]
    Arithmetic(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Loss became NaN or infinite while training.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The function under a gradient check is not deterministic.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("stratification error: class {class:?} {message}")]
    Stratification { class: String, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("state error: {0}")]
    State(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Wraps the error with a description of where it happened (seed, stage, ...).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line runner: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Usage(_) | Error::State(_) => 2,
            Error::Divergence { .. }
            | Error::NonFiniteLoss(_)
            | Error::Numeric(_)
            | Error::Arithmetic(_) => 4,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::Task(_)
            | Error::Stratification { .. }
            | Error::DatasetTooSmall(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
