use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Core(#[from] tov_core::Error),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for data format, 4 for numerical failures,
    /// 1 otherwise.
    pub fn exit_code(&self) -> ExitCode {
        use tov_core::Error as E;
        ExitCode::from(match self {
            CliError::Config { .. } | CliError::Core(E::Config { .. }) => 2,
            CliError::Core(E::Format { .. }) => 3,
            CliError::Core(E::Numerical(_)) => 4,
            _ => 1,
        })
    }
}
