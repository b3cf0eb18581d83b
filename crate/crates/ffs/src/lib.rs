//! A user-space Berkeley fast file system.
//!
//! The crate operates on ordinary files treated as sector-addressed disk
//! images. It provides the full stack: BSD disklabels and transfer metrics
//! ([`devimg`]), the on-disk layout with its cylinder-group geometry
//! ([`layout`]), a block buffer cache with the classic LRU/AGE replacement
//! policy ([`bufcache`]), the fragment-aware block and inode allocator
//! ([`alloc`]), file bodies ([`inode`]), directories with a capability-checked
//! name cache ([`namespace`]), per-user and per-group quotas ([`quota`]), and
//! a concatenated-disk driver ([`ccd`]).
//!
//! Everything is single-owner: one `Fs` owns one mounted partition and no
//! operation blocks. Where a kernel would sleep on a busy resource, the
//! library returns [`FsError::WouldBlock`] and the caller decides whether to
//! retry. Invariant violations (double frees, unbalanced busy counts) panic;
//! they are bugs, not conditions.

pub mod alloc;
pub mod bufcache;
mod clock;
mod codec;
pub mod devimg;
mod errors;
pub mod fs;
pub mod inode;
pub mod layout;
pub mod mkfs;
pub mod namespace;
pub mod quota;

pub use clock::{Clock, FakeClock, SharedClock, SystemClock};
pub use errors::{FsError, Result};
pub use fs::{Fs, MountOpts};
