//! Commands behind the `lgformer` binary. Each `run_*` function does the
//! work of one subcommand and returns what it wrote, so tests can drive
//! them without a process boundary.

pub mod config;
pub mod dump;
pub mod emerge;
pub mod eval;
pub mod gen;
pub mod images;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<lgformer::Error> for CliError {
    fn from(e: lgformer::Error) -> Self {
        match &e {
            lgformer::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Validation(e.to_string()),
            _ if e.is_validation() => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        lgformer::Error::Io(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Writes `contents` to `dir/name` and returns the path.
pub(crate) fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

/// Class names, background first.
pub const PART_NAMES: [&str; 7] = ["background", "head", "torso", "legs", "chassis", "wheels", "roof"];
pub const OBJECT_NAMES: [&str; 3] = ["background", "creature", "vehicle"];
