use std::path::PathBuf;

use geoalign_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Input {
        path: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {}: {message}", path.display())]
    Write { path: PathBuf, message: String },
    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
}

impl CliError {
    /// 0 success, 1 output failure, 2 bad config or input, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::Input { source: e, .. } => core_exit_code(e),
            CliError::Config { .. } | CliError::Read { .. } => 2,
            CliError::Write { .. } | CliError::Locked(_) => 1,
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_)
        | CoreError::Format(_)
        | CoreError::ShapeMismatch { .. }
        | CoreError::InvalidRotation(_)
        | CoreError::InvalidIntrinsics(_)
        | CoreError::InvalidDepth(_)
        | CoreError::InsufficientFrames { .. }
        | CoreError::InvalidSchedule(_)
        | CoreError::GroupTooSmall(_)
        | CoreError::Empty(_) => 2,
        _ => 3,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
