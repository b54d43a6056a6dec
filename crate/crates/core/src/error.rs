use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("channel `{0}` is never observed in the dataset")]
    UnobservedChannel(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("no predictable outputs at threshold {0}")]
    NoPredictableOutputs(f64),
    #[error("no feasible masks at threshold {0}")]
    NoFeasibleMasks(f64),
    #[error("non-finite value encountered at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },
    #[error("no feasible estimation path: {0}")]
    NoFeasiblePath(String),
    #[error("command outside joint limits: {0}")]
    LimitViolation(String),
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
