use std::path::PathBuf;

use crate::dynamics::Trajectory;

/// A rollout produced a non-finite state.
///
/// `partial` holds every saved sample computed before the failure, so callers
/// that can tolerate a short trajectory (forecasts, breakdown analysis) still
/// have something to work with.
#[derive(Debug, Clone, thiserror::Error)]
#[error("integration blew up at t = {time} after {} saved samples", partial.len())]
pub struct Blowup {
    pub time: f64,
    pub partial: Trajectory,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Blowup(#[from] Blowup),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {consecutive} consecutive iterations with a non-finite rollout")]
    Diverged { consecutive: usize, history: Vec<f64> },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
