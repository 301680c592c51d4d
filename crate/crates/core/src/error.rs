use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate embedding for persona {persona_id}: norm {norm:e}")]
    DegenerateEmbedding { persona_id: u32, norm: f64 },

    #[error("degenerate projection: pre-normalization norm {0:e}")]
    DegenerateProjection(f64),

    #[error("invalid action {action} for agent {agent} (ontology has {n_actions} actions)")]
    Action {
        agent: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
