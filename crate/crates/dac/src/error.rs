use thiserror::Error;

#[derive(Debug, Error)]
pub enum DacError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DacError>;

impl DacError {
    /// Process exit code used by the CLI: 2 for configuration/manifest
    /// problems, 3 for bad data or unreadable files.
    pub fn exit_code(&self) -> i32 {
        match self {
            DacError::Config(_) | DacError::Format(_) | DacError::Shape(_) => 2,
            DacError::Data(_) | DacError::Io(_) => 3,
        }
    }
}
