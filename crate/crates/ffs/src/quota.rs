//! Disk quotas: per-user and per-group block and inode limits.
//!
//! Limits and usage live in quota files inside the filesystem itself, one
//! 32-byte record per id, indexed by id. In-core records are cached in a
//! refcount-plus-LRU table; a record whose refcount drops to zero stays
//! hashed so the next open of the same id finds it without a file read.

use crate::codec::{Rd, Wr};
use crate::errors::{FsError, Result};
use crate::fs::Fs;

pub const USRQUOTA: usize = 0;
pub const GRPQUOTA: usize = 1;
pub const QUOTA_NAMES: [&str; 2] = ["user", "group"];

/// Default window for exceeding a soft limit.
pub const GRACE_SECS: i64 = 7 * 24 * 60 * 60;

pub const DQ_LOCK: u32 = 0x01;
pub const DQ_WANT: u32 = 0x02;
pub const DQ_MOD: u32 = 0x04;
/// No limits on disk; the record only tracks usage.
pub const DQ_FAKE: u32 = 0x08;
/// Block-limit warning already issued.
pub const DQ_BLKS: u32 = 0x10;
/// Inode-limit warning already issued.
pub const DQ_INODS: u32 = 0x20;

/// One quota-file record. Block counts are in fragments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dqblk {
    pub bhardlimit: u32,
    pub bsoftlimit: u32,
    pub curblocks: u32,
    pub ihardlimit: u32,
    pub isoftlimit: u32,
    pub curinodes: u32,
    /// Absolute expiry of the block soft-limit grace, 0 when unset.
    pub btime: i64,
    pub itime: i64,
}

pub const DQBLK_SIZE: usize = 32;

impl Dqblk {
    pub fn to_bytes(&self) -> [u8; DQBLK_SIZE] {
        let mut w = Wr::with_capacity(DQBLK_SIZE);
        w.u32(self.bhardlimit);
        w.u32(self.bsoftlimit);
        w.u32(self.curblocks);
        w.u32(self.ihardlimit);
        w.u32(self.isoftlimit);
        w.u32(self.curinodes);
        w.u32(self.btime as u32);
        w.u32(self.itime as u32);
        w.done().try_into().unwrap()
    }

    pub fn parse(bytes: &[u8]) -> Result<Dqblk> {
        if bytes.len() < DQBLK_SIZE {
            return Err(crate::errors::FsError::Corrupt(
                "quota record: short read".into(),
            ));
        }
        let mut r = Rd::new(bytes);
        Ok(Dqblk {
            bhardlimit: r.u32(),
            bsoftlimit: r.u32(),
            curblocks: r.u32(),
            ihardlimit: r.u32(),
            isoftlimit: r.u32(),
            curinodes: r.u32(),
            btime: r.u32() as i64,
            itime: r.u32() as i64,
        })
    }

    pub fn is_empty(&self) -> bool {
        *self == Dqblk::default()
    }
}

/// An in-core quota record.
#[derive(Debug)]
pub struct Dquot {
    pub id: u32,
    pub qtype: usize,
    pub dq: Dqblk,
    pub flags: u32,
    pub refcount: u32,
}

/// Per-mount quota state. One slot per quota type; a slot is live while
/// its quota file is open.
pub struct QuotaState {
    /// Inode number of the open quota file, per type.
    pub(crate) qfile: [Option<u32>; 2],
    /// All in-core records, keyed by slab index.
    pub(crate) dquots: Vec<Option<Dquot>>,
    pub(crate) by_key: std::collections::HashMap<(usize, u32), usize>,
    /// Refcount-zero records in eviction order.
    pub(crate) lru: std::collections::VecDeque<usize>,
    pub(crate) free_slots: Vec<usize>,
    /// Grace window applied when a soft limit is first crossed.
    pub(crate) grace: [i64; 2],
}

impl Default for QuotaState {
    fn default() -> Self {
        Self::new()
    }
}

impl QuotaState {
    pub fn new() -> QuotaState {
        QuotaState {
            qfile: [None, None],
            dquots: Vec::new(),
            by_key: std::collections::HashMap::new(),
            lru: std::collections::VecDeque::new(),
            free_slots: Vec::new(),
            grace: [GRACE_SECS; 2],
        }
    }

    pub fn any_open(&self) -> bool {
        self.qfile.iter().any(|q| q.is_some())
    }

    /// The open quota file's own growth must never be charged against the
    /// quotas it implements.
    pub fn is_quota_file(&self, ino: u32) -> bool {
        self.qfile.contains(&Some(ino))
    }
}

/// Would adding `change` fragments break this record's block limits?
/// Crossing the soft limit starts the grace clock instead of failing;
/// a denial warns once until a release rearms the warning.
fn chkdqchg(dq: &mut Dquot, change: i64, now: i64, grace: i64) -> Result<()> {
    let ncur = dq.dq.curblocks as i64 + change;
    if dq.dq.bhardlimit != 0 && ncur >= dq.dq.bhardlimit as i64 {
        if dq.flags & DQ_BLKS == 0 {
            eprintln!(
                "ffs: {} {} disk limit reached",
                QUOTA_NAMES[dq.qtype], dq.id
            );
            dq.flags |= DQ_BLKS;
        }
        return Err(FsError::QuotaExceeded);
    }
    if dq.dq.bsoftlimit != 0 && ncur >= dq.dq.bsoftlimit as i64 {
        if (dq.dq.curblocks as i64) < dq.dq.bsoftlimit as i64 {
            dq.dq.btime = now + grace;
            eprintln!(
                "ffs: warning, {} {} disk quota exceeded",
                QUOTA_NAMES[dq.qtype], dq.id
            );
            return Ok(());
        }
        if now > dq.dq.btime {
            if dq.flags & DQ_BLKS == 0 {
                eprintln!(
                    "ffs: {} {} disk quota exceeded for too long",
                    QUOTA_NAMES[dq.qtype], dq.id
                );
                dq.flags |= DQ_BLKS;
            }
            return Err(FsError::QuotaExceeded);
        }
    }
    Ok(())
}

/// Inode-count twin of [`chkdqchg`].
fn chkiqchg(dq: &mut Dquot, change: i64, now: i64, grace: i64) -> Result<()> {
    let ncur = dq.dq.curinodes as i64 + change;
    if dq.dq.ihardlimit != 0 && ncur >= dq.dq.ihardlimit as i64 {
        if dq.flags & DQ_INODS == 0 {
            eprintln!(
                "ffs: {} {} inode limit reached",
                QUOTA_NAMES[dq.qtype], dq.id
            );
            dq.flags |= DQ_INODS;
        }
        return Err(FsError::QuotaExceeded);
    }
    if dq.dq.isoftlimit != 0 && ncur >= dq.dq.isoftlimit as i64 {
        if (dq.dq.curinodes as i64) < dq.dq.isoftlimit as i64 {
            dq.dq.itime = now + grace;
            eprintln!(
                "ffs: warning, {} {} inode quota exceeded",
                QUOTA_NAMES[dq.qtype], dq.id
            );
            return Ok(());
        }
        if now > dq.dq.itime {
            if dq.flags & DQ_INODS == 0 {
                eprintln!(
                    "ffs: {} {} inode quota exceeded for too long",
                    QUOTA_NAMES[dq.qtype], dq.id
                );
                dq.flags |= DQ_INODS;
            }
            return Err(FsError::QuotaExceeded);
        }
    }
    Ok(())
}

impl Fs {
    /// Charge `change` fragments of disk to the records attached to `vid`.
    /// Releases always apply, clamped at zero, and rearm the denial
    /// warning; charges fail with `QuotaExceeded` when any attached record
    /// refuses, unless forced or the mount is privileged.
    pub(crate) fn chkdq(&mut self, vid: usize, change: i64, force: bool) -> Result<()> {
        if change == 0 {
            return Ok(());
        }
        let slots = self.vnodes.get(vid).dq;
        if change < 0 {
            for idx in slots.into_iter().flatten() {
                let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
                dq.dq.curblocks = dq.dq.curblocks.saturating_sub(-change as u32);
                dq.flags &= !DQ_BLKS;
                dq.flags |= DQ_MOD;
            }
            return Ok(());
        }
        if !force && !self.privileged {
            let now = self.clock.wall().0;
            for (qtype, idx) in slots.iter().enumerate() {
                if let Some(idx) = *idx {
                    let grace = self.quota.grace[qtype];
                    let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
                    chkdqchg(dq, change, now, grace)?;
                }
            }
        }
        for idx in slots.into_iter().flatten() {
            let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
            dq.dq.curblocks += change as u32;
            dq.flags |= DQ_MOD;
        }
        Ok(())
    }

    /// Inode-count twin of [`Fs::chkdq`].
    pub(crate) fn chkiq(&mut self, vid: usize, change: i64, force: bool) -> Result<()> {
        if change == 0 {
            return Ok(());
        }
        let slots = self.vnodes.get(vid).dq;
        if change < 0 {
            for idx in slots.into_iter().flatten() {
                let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
                dq.dq.curinodes = dq.dq.curinodes.saturating_sub(-change as u32);
                dq.flags &= !DQ_INODS;
                dq.flags |= DQ_MOD;
            }
            return Ok(());
        }
        if !force && !self.privileged {
            let now = self.clock.wall().0;
            for (qtype, idx) in slots.iter().enumerate() {
                if let Some(idx) = *idx {
                    let grace = self.quota.grace[qtype];
                    let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
                    chkiqchg(dq, change, now, grace)?;
                }
            }
        }
        for idx in slots.into_iter().flatten() {
            let dq = self.quota.dquots[idx].as_mut().expect("attached dquot");
            dq.dq.curinodes += change as u32;
            dq.flags |= DQ_MOD;
        }
        Ok(())
    }
}
