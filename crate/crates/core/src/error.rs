use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error on {axis}: {detail}")]
    Shape { axis: &'static str, detail: String },

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("gradient check failed: {0}")]
    Check(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("missing data for ids: {}", .0.join(", "))]
    MissingData(Vec<String>),
}

impl Error {
    pub(crate) fn shape(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
