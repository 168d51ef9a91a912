use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("usage/config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CoreError {
    /// Process exit code convention: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 1,
            CoreError::Data(_) | CoreError::Io(_) | CoreError::Serde(_) => 2,
            CoreError::Numerical(_) => 3,
        }
    }
}
