use thiserror::Error;

/// Invalid configuration (grid limits, patch divisibility, tiling, ...).
#[derive(Debug, Error)]
#[error("configuration error: {msg}")]
pub struct ConfigError {
    pub msg: String,
}

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError { msg: msg.into() }
    }
}

/// Errors surfaced by the numeric pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical error in {context}: {msg}")]
    Numerical { context: String, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing file: {0}")]
    MissingFile(std::path::PathBuf),
}

impl PipelineError {
    pub fn numerical(context: impl Into<String>, msg: impl Into<String>) -> Self {
        PipelineError::Numerical {
            context: context.into(),
            msg: msg.into(),
        }
    }
}
