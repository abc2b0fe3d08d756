use thiserror::Error;

/// Errors raised anywhere in the estimation and testing pipeline.
#[derive(Debug, Error)]
pub enum QspecError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular design: columns {columns:?} are linearly dependent on the others")]
    SingularDesign { columns: Vec<String> },

    #[error("solver did not converge after {iterations} iterations (duality gap trace tail: {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("fit failed at tau = {tau}: {source}")]
    AtTau {
        tau: f64,
        #[source]
        source: Box<QspecError>,
    },

    #[error("fit failed for group {group}: {source}")]
    Group {
        group: String,
        #[source]
        source: Box<QspecError>,
    },

    #[error("{failed} of {total} replicates failed (limit 5%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("data error on line {line}: {message}")]
    Data { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QspecError {
    pub(crate) fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        QspecError::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_tau(self, tau: f64) -> Self {
        match self {
            already @ QspecError::AtTau { .. } => already,
            other => QspecError::AtTau {
                tau,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, QspecError>;
