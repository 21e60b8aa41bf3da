use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("payload decode: {field}: {detail}")]
    Payload { field: &'static str, detail: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("input: {0}")]
    Input(String),
    #[error("service: {0}")]
    Service(String),
    #[error(transparent)]
    Core(#[from] mixlm_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub(crate) fn payload(field: &'static str, detail: impl Into<String>) -> Self {
        ServeError::Payload {
            field,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ServeError>;
