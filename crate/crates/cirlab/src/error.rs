use std::io;
use std::path::PathBuf;

/// Failures of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] cirlab_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cirlab_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Core(E::Diverged { .. } | E::Domain { .. }) => 4,
            CliError::Core(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl ToString) -> CliError {
        CliError::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
