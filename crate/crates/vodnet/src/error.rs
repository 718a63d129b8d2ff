use std::path::PathBuf;

/// Errors of the file and command layer; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("training stalled: {0}")]
    Stalled(String),
    #[error("stopped because the other training loop failed")]
    Aborted,
    #[error(transparent)]
    Core(#[from] vodnet_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if is_divergence(e) => 3,
            CliError::Core(vodnet_core::Error::Config(_)) => 2,
            CliError::Missing { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::Missing {
                path,
                reason: source.to_string(),
            };
        }
        CliError::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        CliError::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

fn is_divergence(e: &vodnet_core::Error) -> bool {
    matches!(e, vodnet_core::Error::Divergence { .. } | vodnet_core::Error::NonFinite(_))
}
