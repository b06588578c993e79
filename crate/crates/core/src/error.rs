use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error in `{param}`: {detail}")]
    Numeric { param: String, detail: String },

    #[error("determinism error: loss changed between identical evaluations ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: validation loss is {value} at epoch {epoch}")]
    Diverged { epoch: usize, value: f64 },

    #[error("environment error: {0}")]
    Env(String),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension(format!(
            "{op}: incompatible shapes {}x{} and {}x{}",
            lhs.0, lhs.1, rhs.0, rhs.1
        ))
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
