use thiserror::Error;

/// Errors shared by every module of the core crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid bound: {0}")]
    InvalidBound(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate}, frobenius bound {frobenius})")]
    Convergence {
        iterations: usize,
        estimate: f64,
        frobenius: f64,
    },

    #[error("layout: {0}")]
    Layout(String),

    #[error("capacity: need {required} rows but embedding has {available} ({detail})")]
    Capacity {
        required: usize,
        available: usize,
        detail: String,
    },

    #[error("lag order {q} is invalid for a series of length {t}")]
    Lag { q: usize, t: usize },

    #[error("invalid step: {0}")]
    InvalidStep(String),

    #[error("condition violated: {0}")]
    Condition(String),

    #[error("distribution has a zero-probability atom at index {0}")]
    Positivity(usize),

    #[error("size: {0}")]
    Size(String),

    #[error("diverged at step {step}")]
    Divergence { step: usize },

    #[error("series {series} diverged at step {step}")]
    SeriesDivergence { series: usize, step: usize },

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    /// Innermost error once layer annotations are stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }
}
