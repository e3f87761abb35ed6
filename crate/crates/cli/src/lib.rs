//! `pbo-lab`: run configured experiments, turn result directories into
//! figure data, and run the oracle checks.

pub mod figure;
pub mod run;
pub mod svg;
pub mod verify;

use std::path::PathBuf;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration, arguments or missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Failed(_) | CliError::Io { .. } => 1,
        }
    }

    /// Classify a core error raised while running `context`.
    pub fn from_core(context: &str, e: pbo_core::Error) -> Self {
        use pbo_core::Error;
        match e {
            Error::Config { field, message } => {
                CliError::Usage(format!("{context}: field `{field}`: {message}"))
            }
            Error::Divergence { .. } | Error::NonFinite(_) => {
                CliError::Divergence(format!("{context}: {e}"))
            }
            other => CliError::Failed(format!("{context}: {other}")),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_file(path: &std::path::Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &std::path::Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Worker count: `PBO_LAB_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("PBO_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
