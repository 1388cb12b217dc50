use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Command failures, partitioned by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }

    pub fn internal(msg: impl std::fmt::Display) -> Self {
        CliError::Internal(msg.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Paths written by a successful command.
#[derive(Debug, Default)]
pub struct Emitted(pub Vec<PathBuf>);

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, content: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)
}

pub fn emit(out: &mut Emitted, path: PathBuf, content: impl AsRef<[u8]>) -> CliResult<()> {
    write_atomic(&path, content.as_ref()).map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))?;
    out.0.push(path);
    Ok(())
}

/// Fails with a usage error naming `flag` when `path` does not exist.
pub fn require_path(flag: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag}: {} does not exist", path.display())))
    }
}

pub fn json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}
