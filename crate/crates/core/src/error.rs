use thiserror::Error;

use crate::flash::FlashError;

/// Errors surfaced by the file system models and the VFS layer.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error("volume is not mounted")]
    NotMounted,
    #[error("volume is already mounted")]
    AlreadyMounted,
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    Exists(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("is a directory: {0}")]
    IsADirectory(String),
    #[error("directory not empty: {0}")]
    NotEmpty(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("no space left on device")]
    NoSpace,
    #[error("partition too small: {0} blocks")]
    PartitionTooSmall(u32),
    #[error("nothing to collect")]
    NothingToCollect,
    #[error("no file system found: {0}")]
    NoFilesystem(String),
    #[error("corrupt on-flash structure: {0}")]
    Corrupt(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type FsResult<T> = Result<T, FsError>;
