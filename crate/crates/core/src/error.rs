use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value produced at stage `{stage}`")]
    Numerical { stage: &'static str },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
