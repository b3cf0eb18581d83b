//! The error type shared by every layer.
//!
//! Environmental conditions (no space, quota, missing names) come back as
//! values. Invariant violations (releasing a buffer that is not busy, freeing
//! a free block, busy-count underflow) panic with a message naming the broken
//! invariant; callers are not expected to recover from their own bugs.

use std::io;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FsError>;

#[derive(Debug, Error)]
pub enum FsError {
    #[error(transparent)]
    Io(#[from] io::Error),

    /// The operation needs a resource that is currently busy. A kernel would
    /// sleep here; a single-owner library reports and lets the caller retry.
    #[error("would block: {0}")]
    WouldBlock(&'static str),

    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },

    #[error("{what}: {len} bytes is not a multiple of {unit}")]
    Unaligned {
        what: &'static str,
        len: u64,
        unit: u64,
    },

    #[error("bad {what} magic: found {found:#x}, want {want:#x}")]
    BadMagic {
        what: &'static str,
        found: u32,
        want: u32,
    },

    #[error("label checksum mismatch: stored {stored:#06x}, computed {computed:#06x}")]
    BadChecksum { stored: u16, computed: u16 },

    #[error("corrupt {0}")]
    Corrupt(String),

    #[error("no space left on filesystem")]
    NoSpace,
    #[error("quota exceeded")]
    QuotaExceeded,
    #[error("file too large")]
    FileTooBig,
    #[error("not found")]
    NotFound,
    #[error("already exists")]
    Exists,
    #[error("not a directory")]
    NotADirectory,
    #[error("is a directory")]
    IsADirectory,
    #[error("directory not empty")]
    NotEmpty,
    #[error("too many links")]
    TooManyLinks,
    #[error("too many levels of symbolic links")]
    TooManySymlinks,
    #[error("name too long")]
    NameTooLong,
    #[error("operation not permitted: {0}")]
    NotPermitted(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    /// The handle's capability no longer matches the live object.
    #[error("stale handle")]
    Stale,
    #[error("read-only filesystem")]
    ReadOnly,
}

impl FsError {
    /// Process exit code for the command-line tools: 2 for data and
    /// validation trouble, 3 for transport failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FsError::Io(_) => 3,
            _ => 2,
        }
    }
}
