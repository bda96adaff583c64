use std::path::Path;

/// Failure of a command, classified by its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Internal(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Checkpoint(m) | CliError::GradCheck(m) | CliError::Internal(m) => m,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        CliError::Checkpoint(msg.into())
    }
}

impl From<mtnlu_core::Error> for CliError {
    fn from(e: mtnlu_core::Error) -> Self {
        use mtnlu_core::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Data(m) | E::Metric(m) => CliError::Data(m),
            other => CliError::Internal(other.to_string()),
        }
    }
}

/// Reads a whole file, classifying failures with `kind`.
pub fn read_to_string(path: &Path, kind: fn(String) -> CliError) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| kind(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// The message of a core error without its category prefix.
pub fn detail(e: mtnlu_core::Error) -> String {
    use mtnlu_core::Error as E;
    match e {
        E::Config(m) | E::Data(m) | E::Metric(m) | E::Contract(m) => m,
        other => other.to_string(),
    }
}
