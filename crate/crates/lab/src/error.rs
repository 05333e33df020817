use std::path::PathBuf;

pub type LabResult<T> = Result<T, LabError>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Bad config file, override or field value. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed input file; `location` is a byte offset or line number.
    #[error("parse error in {path} at {location}: {msg}")]
    Parse { path: PathBuf, location: String, msg: String },
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch in tensor `{0}`")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] qatlab_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, location: impl Into<String>, msg: impl Into<String>) -> Self {
        LabError::Parse { path: path.into(), location: location.into(), msg: msg.into() }
    }

    /// Process exit code: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            _ => 3,
        }
    }
}
