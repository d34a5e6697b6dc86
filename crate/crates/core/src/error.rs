use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("dimension error: {0} of an empty tensor")]
    Empty(&'static str),
    #[error("contract violation: expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
