//! File bodies: the inode table front end, logical-to-physical block
//! mapping, reads and writes through the buffer cache, block allocation
//! for growth, and truncation.
//!
//! Files end in a run of fragments that grows in place when the neighbors
//! are free and otherwise moves, carrying its data through the cache; only
//! the last block of a file may be such a run. Metadata ordering on disk
//! is fixed: a new chain link is written before anything points at it, a
//! pruned inode or indirect block is written before the blocks it dropped
//! are freed.

use crate::bufcache::{Owner, B_INVALID};
use crate::errors::{FsError, Result};
use crate::fs::{strat, Fs, WriteHow};
use crate::layout::{
    APPEND_MASK, IFDIR, IFLNK, IFMT, IMMUTABLE_MASK, MAXSYMLINKLEN, NDADDR, NIADDR, ROOTINO,
};
use crate::namespace::{NewVnode, Vnode, IN_ACCESS, IN_CHANGE, IN_UPDATE};

/// Which way a transfer moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IoDir {
    /// File to caller memory.
    Read,
    /// Caller memory to file.
    Write,
}

enum Segs<'a> {
    Read(Vec<&'a mut [u8]>),
    Write(Vec<&'a [u8]>),
}

/// A scatter/gather transfer cursor. `offset` is the file position of the
/// next byte; the residual count is the bytes still to move. Every move
/// advances both by exactly the bytes moved.
pub struct IoCursor<'a> {
    pub offset: u64,
    resid: usize,
    segs: Segs<'a>,
    seg: usize,
    segoff: usize,
}

impl<'a> IoCursor<'a> {
    /// A cursor that fills `segs` from the file, starting at `offset`.
    pub fn read_into(offset: u64, segs: Vec<&'a mut [u8]>) -> IoCursor<'a> {
        let resid = segs.iter().map(|s| s.len()).sum();
        IoCursor {
            offset,
            resid,
            segs: Segs::Read(segs),
            seg: 0,
            segoff: 0,
        }
    }

    /// A cursor that drains `segs` into the file, starting at `offset`.
    pub fn write_from(offset: u64, segs: Vec<&'a [u8]>) -> IoCursor<'a> {
        let resid = segs.iter().map(|s| s.len()).sum();
        IoCursor {
            offset,
            resid,
            segs: Segs::Write(segs),
            seg: 0,
            segoff: 0,
        }
    }

    pub fn resid(&self) -> usize {
        self.resid
    }

    pub fn dir(&self) -> IoDir {
        match self.segs {
            Segs::Read(_) => IoDir::Read,
            Segs::Write(_) => IoDir::Write,
        }
    }

    fn seg_len(&self) -> usize {
        match &self.segs {
            Segs::Read(v) => v.get(self.seg).map_or(0, |s| s.len()),
            Segs::Write(v) => v.get(self.seg).map_or(0, |s| s.len()),
        }
    }

    /// Move up to `block.len()` bytes between `block` and the segments, in
    /// the cursor's direction. Returns the bytes moved.
    pub fn uiomove(&mut self, block: &mut [u8]) -> usize {
        let mut done = 0;
        while done < block.len() && self.resid > 0 {
            if self.segoff >= self.seg_len() {
                self.seg += 1;
                self.segoff = 0;
                continue;
            }
            let want = block.len() - done;
            let n = match &mut self.segs {
                Segs::Read(segs) => {
                    let seg = &mut segs[self.seg];
                    let n = (seg.len() - self.segoff).min(want);
                    seg[self.segoff..self.segoff + n].copy_from_slice(&block[done..done + n]);
                    n
                }
                Segs::Write(segs) => {
                    let seg = segs[self.seg];
                    let n = (seg.len() - self.segoff).min(want);
                    block[done..done + n].copy_from_slice(&seg[self.segoff..self.segoff + n]);
                    n
                }
            };
            done += n;
            self.segoff += n;
            self.resid -= n;
        }
        self.offset += done as u64;
        done
    }
}

/// How a write behaves.
#[derive(Clone, Copy, Debug, Default)]
pub struct WriteOpts {
    /// Push every block and chain link out before returning.
    pub sync: bool,
    /// Start at end of file regardless of the cursor position.
    pub append: bool,
}

/// Pointer chain for a block in the indirect zone: the `di_ib` slot to
/// start from and the entry index at each level on the way down.
fn indir_path(nindir: i64, lbn: i64) -> Option<(usize, Vec<i64>)> {
    let mut n = lbn - NDADDR as i64;
    if n < nindir {
        return Some((0, vec![n]));
    }
    n -= nindir;
    if n < nindir * nindir {
        return Some((1, vec![n / nindir, n % nindir]));
    }
    n -= nindir * nindir;
    if n < nindir * nindir * nindir {
        return Some((2, vec![n / (nindir * nindir), n / nindir % nindir, n % nindir]));
    }
    None
}

/// Where the pointer to a freshly allocated chain link was stored, for
/// undoing a half-built chain.
enum UndoPtr {
    Ib(usize),
    Slot(i64, usize),
}

impl Fs {
    /// Fetch the in-core inode for `ino`, reading its dinode from the inode
    /// block on a miss. Every successful iget pairs with one iput.
    pub fn iget(&mut self, ino: u32) -> Result<usize> {
        let limit = self.sb.ncg as u64 * self.sb.ipg as u64;
        if (ino as u64) < ROOTINO as u64 || (ino as u64) >= limit {
            return Err(FsError::OutOfRange {
                what: "inode number",
                value: ino as u64,
                limit,
            });
        }
        if let Some(vid) = self.vnodes.lookup(ino) {
            self.vnodes.vget(vid);
            return Ok(vid);
        }
        let din = self.read_dinode(ino)?;
        let vid = match self.vnodes.getnewvnode()? {
            NewVnode::Fresh(vid) => vid,
            NewVnode::Recycled(vid, old) => {
                self.reclaim(old)?;
                vid
            }
        };
        self.vnodes.install(vid, ino, din);
        Ok(vid)
    }

    /// Write out and drop whatever a recycled table slot's previous
    /// occupant still owned.
    fn reclaim(&mut self, mut old: Vnode) -> Result<()> {
        let (sec, nsec) = self.clock.wall();
        if old.fold_times(sec as i32, nsec) && !self.read_only {
            self.write_dinode(old.ino, &old.din, WriteHow::Delayed)?;
        }
        let mut strat = strat!(self);
        self.cache
            .invalidate_owner(Owner::File(old.ino as u64), !self.read_only, &mut strat)
    }

    /// Drop one reference. When the last reference goes and the file has
    /// no names left, the storage and the inode itself are given back.
    pub fn iput(&mut self, vid: usize) -> Result<()> {
        if !self.vnodes.vrele(vid) {
            return Ok(());
        }
        let (ino, mode, nlink) = {
            let vn = self.vnodes.get(vid);
            (vn.ino, vn.din.mode, vn.din.nlink)
        };
        if mode != 0 && nlink <= 0 && !self.read_only {
            self.chkiq(vid, -1, true)?;
            self.itrunc(vid, 0, false)?;
            let was_dir = mode & IFMT == IFDIR;
            {
                let vn = self.vnodes.get_mut(vid);
                vn.din.mode = 0;
                vn.iflag |= IN_CHANGE | IN_UPDATE;
            }
            self.freefile(ino, was_dir)?;
            self.iupdate(vid, WriteHow::Delayed)?;
            self.vnodes.unhash(vid);
        } else {
            self.iupdate(vid, WriteHow::Delayed)?;
        }
        Ok(())
    }

    /// Map a file block to its fragment address; `None` is a hole.
    pub fn bmap(&mut self, vid: usize, lbn: i64) -> Result<Option<i64>> {
        assert!(lbn >= 0, "bmap: negative block {lbn}");
        if lbn < NDADDR as i64 {
            let a = self.vnodes.get(vid).din.db[lbn as usize];
            return Ok(if a == 0 { None } else { Some(a as i64) });
        }
        let (root, offs) =
            indir_path(self.sb.nindir as i64, lbn).ok_or(FsError::FileTooBig)?;
        let mut addr = self.vnodes.get(vid).din.ib[root] as i64;
        for &off in &offs {
            if addr == 0 {
                return Ok(None);
            }
            addr = self.indir_entry(addr, off as usize)?;
        }
        Ok(if addr == 0 { None } else { Some(addr) })
    }

    /// One pointer out of an indirect block.
    fn indir_entry(&mut self, iaddr: i64, off: usize) -> Result<i64> {
        let sector = self.sb.fsbtodb(iaddr);
        let bsize = self.sb.bsize as usize;
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, bsize, &mut strat)?;
        let v = i32::from_be_bytes(self.cache.data(id)[off * 4..off * 4 + 4].try_into().unwrap());
        self.cache.brelse(id);
        Ok(v as i64)
    }

    /// Fill the cursor from the file. Stops at end of file; holes read as
    /// zeros. While more of the file follows, each miss also starts a read
    /// of the next block so sequential readers stay one block ahead.
    pub fn read(&mut self, vid: usize, cur: &mut IoCursor) -> Result<usize> {
        assert!(cur.dir() == IoDir::Read, "read: cursor headed the wrong way");
        if cur.offset > self.sb.maxfilesize {
            return Err(FsError::FileTooBig);
        }
        let ino = self.vnodes.get(vid).ino;
        let owner = Owner::File(ino as u64);
        let mut zeros = Vec::new();
        let mut total = 0usize;
        while cur.resid() > 0 {
            let size = self.vnodes.get(vid).din.size;
            if cur.offset >= size {
                break;
            }
            let lbn = self.sb.lblkno(cur.offset);
            let on = self.sb.blkoff(cur.offset) as usize;
            let bsz = self.sb.blksize(size, lbn);
            let xfer = cur
                .resid()
                .min(bsz - on)
                .min((size - cur.offset) as usize);
            match self.bmap(vid, lbn)? {
                None => {
                    if zeros.len() < xfer {
                        zeros.resize(xfer, 0);
                    }
                    total += cur.uiomove(&mut zeros[..xfer]);
                }
                Some(addr) => {
                    let sector = self.sb.fsbtodb(addr);
                    let next = lbn + 1;
                    let ra = if self.sb.lblktosize(next) >= size {
                        None
                    } else {
                        self.bmap(vid, next)?
                            .map(|na| (next, self.sb.fsbtodb(na), self.sb.blksize(size, next)))
                    };
                    let mut strat = strat!(self);
                    let id = match ra {
                        Some(r) => self
                            .cache
                            .breadn(owner, lbn, sector, bsz, Some(r), &mut strat)?,
                        None => self.cache.bread(owner, lbn, sector, bsz, &mut strat)?,
                    };
                    total += cur.uiomove(&mut self.cache.data_mut(id)[on..on + xfer]);
                    self.cache.brelse(id);
                }
            }
        }
        self.vnodes.get_mut(vid).iflag |= IN_ACCESS;
        Ok(total)
    }

    /// Drain the cursor into the file, growing it as needed. Synchronous
    /// writes go straight out; a filled block starts an asynchronous write;
    /// a partial block stays dirty in the cache. On failure the file is
    /// trimmed back to its original size.
    pub fn write(&mut self, vid: usize, cur: &mut IoCursor, opts: WriteOpts) -> Result<usize> {
        assert!(
            cur.dir() == IoDir::Write,
            "write: cursor headed the wrong way"
        );
        self.ro_check()?;
        {
            let din = &self.vnodes.get(vid).din;
            if din.flags & IMMUTABLE_MASK != 0 {
                return Err(FsError::NotPermitted("file is immutable"));
            }
            if din.flags & APPEND_MASK != 0 && !opts.append {
                return Err(FsError::NotPermitted("file only grows at the end"));
            }
            if opts.append {
                cur.offset = din.size;
            }
        }
        if cur.offset + cur.resid() as u64 > self.sb.maxfilesize {
            return Err(FsError::FileTooBig);
        }
        let bsize = self.sb.bsize as usize;
        let osize = self.vnodes.get(vid).din.size;
        let mut total = 0usize;
        let mut failed = None;
        while cur.resid() > 0 {
            let on = self.sb.blkoff(cur.offset) as usize;
            let xfer = cur.resid().min(bsize - on);
            let clr = bsize > xfer;
            let id = match self.balloc_file(vid, cur.offset, xfer, opts.sync, clr) {
                Ok(id) => id,
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            };
            {
                let vn = self.vnodes.get_mut(vid);
                if cur.offset + xfer as u64 > vn.din.size {
                    vn.din.size = cur.offset + xfer as u64;
                }
            }
            let moved = cur.uiomove(&mut self.cache.data_mut(id)[on..on + xfer]);
            debug_assert_eq!(moved, xfer);
            total += moved;
            let mut strat = strat!(self);
            let wres = if opts.sync {
                self.cache.bwrite(id, &mut strat)
            } else if on + xfer == bsize {
                self.cache.bawrite(id, &mut strat)
            } else {
                self.cache.bdwrite(id);
                Ok(())
            };
            self.vnodes.get_mut(vid).iflag |= IN_CHANGE | IN_UPDATE;
            if let Err(e) = wres {
                failed = Some(e);
                break;
            }
        }
        match failed {
            None => Ok(total),
            Some(e) => {
                let _ = self.itrunc(vid, osize, opts.sync);
                Err(e)
            }
        }
    }

    /// Make the block holding `offset` exist and return it as a busy
    /// buffer. `size` bytes will be touched there, never crossing the block
    /// boundary; the last block is allocated (or regrown) only that far,
    /// rounded to fragments. Chain links written here are pushed out before
    /// anything points at them.
    pub(crate) fn balloc_file(
        &mut self,
        vid: usize,
        offset: u64,
        size: usize,
        sync: bool,
        clrbuf: bool,
    ) -> Result<usize> {
        let bsize = self.sb.bsize as usize;
        let on = self.sb.blkoff(offset) as usize;
        assert!(
            size > 0 && size <= bsize - on,
            "balloc: {size} bytes at block offset {on} crosses a block"
        );
        let lbn = self.sb.lblkno(offset);
        let (ino, mut din_size) = {
            let vn = self.vnodes.get(vid);
            (vn.ino, vn.din.size)
        };
        let owner = Owner::File(ino as u64);

        // Writing past the current last block first rounds that block up
        // to a full one; a fragment run may only ever end the file.
        let old_last = self.sb.lblkno(din_size);
        if old_last < NDADDR as i64 && old_last < lbn {
            let nb = self.vnodes.get(vid).din.db[old_last as usize] as i64;
            let osize = self.sb.blksize(din_size, old_last);
            if nb != 0 && osize > 0 && osize < bsize {
                let id = self.frag_regrow(vid, old_last, nb, osize, bsize)?;
                din_size = self.sb.lblktosize(old_last + 1);
                self.vnodes.get_mut(vid).din.size = din_size;
                let mut strat = strat!(self);
                if sync {
                    self.cache.bwrite(id, &mut strat)?;
                } else {
                    self.cache.bawrite(id, &mut strat)?;
                }
            }
        }

        if lbn < NDADDR as i64 {
            let nb = self.vnodes.get(vid).din.db[lbn as usize] as i64;
            if nb != 0 {
                let osize = self.sb.blksize(din_size, lbn);
                if on + size <= osize {
                    let sector = self.sb.fsbtodb(nb);
                    let mut strat = strat!(self);
                    return self.cache.bread(owner, lbn, sector, osize, &mut strat);
                }
                let nsize = self.sb.fragroundup((on + size) as u64) as usize;
                return self.frag_regrow(vid, lbn, nb, osize, nsize);
            }
            // No storage yet: a full block inside the file, a fragment run
            // at its end.
            let nsize = if din_size < self.sb.lblktosize(lbn + 1) {
                self.sb.fragroundup((on + size) as u64) as usize
            } else {
                bsize
            };
            let bap: Vec<i64> = self
                .vnodes
                .get(vid)
                .din
                .db
                .iter()
                .map(|&a| a as i64)
                .collect();
            let pref = self.blkpref(ino, lbn, lbn as usize, &bap);
            let naddr = self.alloc(vid, pref, nsize as i64)?;
            let mut strat = strat!(self);
            let id = self.cache.getblk(owner, lbn, nsize, &mut strat)?;
            self.cache.set_blkno(id, self.sb.fsbtodb(naddr));
            if clrbuf {
                self.cache.data_mut(id).fill(0);
            }
            self.vnodes.get_mut(vid).din.db[lbn as usize] = naddr as i32;
            return Ok(id);
        }

        // The indirect zone: walk the chain, allocating missing links.
        let nindir = self.sb.nindir as i64;
        let (root, offs) = indir_path(nindir, lbn).ok_or(FsError::FileTooBig)?;
        let mut undo: Vec<(i64, UndoPtr)> = Vec::new();
        let mut cur = self.vnodes.get(vid).din.ib[root] as i64;
        if cur == 0 {
            let pref = self.blkpref(ino, lbn, 0, &[]);
            cur = self.alloc(vid, pref, bsize as i64)?;
            self.fresh_indir(cur, sync)?;
            self.vnodes.get_mut(vid).din.ib[root] = cur as i32;
            undo.push((cur, UndoPtr::Ib(root)));
        }
        let last = offs.len() - 1;
        for (depth, &off) in offs.iter().enumerate() {
            let off = off as usize;
            let psector = self.sb.fsbtodb(cur);
            let (slot, bap) = {
                let mut strat = strat!(self);
                let id = self
                    .cache
                    .bread(Owner::Dev, psector, psector, bsize, &mut strat)?;
                let data = self.cache.data(id);
                let at = |i: usize| {
                    i32::from_be_bytes(data[i * 4..i * 4 + 4].try_into().unwrap()) as i64
                };
                let slot = at(off);
                let bap: Vec<i64> = if depth == last && slot == 0 {
                    (0..=off).map(at).collect()
                } else {
                    Vec::new()
                };
                self.cache.brelse(id);
                (slot, bap)
            };
            if depth == last {
                if slot != 0 {
                    let sector = self.sb.fsbtodb(slot);
                    let mut strat = strat!(self);
                    return self.cache.bread(owner, lbn, sector, bsize, &mut strat);
                }
                let pref = self.blkpref(ino, lbn, off, &bap);
                let naddr = match self.alloc(vid, pref, bsize as i64) {
                    Ok(a) => a,
                    Err(e) => {
                        self.balloc_undo(vid, undo);
                        return Err(e);
                    }
                };
                self.write_indir_slot(psector, off, naddr as i32, sync)?;
                let mut strat = strat!(self);
                let id = self.cache.getblk(owner, lbn, bsize, &mut strat)?;
                self.cache.set_blkno(id, self.sb.fsbtodb(naddr));
                if clrbuf {
                    self.cache.data_mut(id).fill(0);
                }
                return Ok(id);
            }
            if slot != 0 {
                cur = slot;
                continue;
            }
            let pref = self.blkpref(ino, lbn, 0, &[]);
            let naddr = match self.alloc(vid, pref, bsize as i64) {
                Ok(a) => a,
                Err(e) => {
                    self.balloc_undo(vid, undo);
                    return Err(e);
                }
            };
            self.fresh_indir(naddr, sync)?;
            self.write_indir_slot(psector, off, naddr as i32, sync)?;
            undo.push((naddr, UndoPtr::Slot(psector, off)));
            cur = naddr;
        }
        unreachable!("indirect chain ended without a data block")
    }

    /// Grow the fragment run at `nb` (block `lbn`, `osize` bytes) to
    /// `nsize`, carrying the data through the cache when it moves. Returns
    /// the run's busy buffer; the grown part reads as zeros.
    fn frag_regrow(
        &mut self,
        vid: usize,
        lbn: i64,
        nb: i64,
        osize: usize,
        nsize: usize,
    ) -> Result<usize> {
        let (ino, bap) = {
            let vn = self.vnodes.get(vid);
            let bap: Vec<i64> = vn.din.db.iter().map(|&a| a as i64).collect();
            (vn.ino, bap)
        };
        let pref = self.blkpref(ino, lbn, lbn as usize, &bap);
        let sector = self.sb.fsbtodb(nb);
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::File(ino as u64), lbn, sector, osize, &mut strat)?;
        let naddr = match self.realloccg(vid, nb, osize as i64, nsize as i64, pref) {
            Ok(a) => a,
            Err(e) => {
                self.cache.brelse(id);
                return Err(e);
            }
        };
        let mut strat = strat!(self);
        self.cache.allocbuf(id, nsize, &mut strat)?;
        self.cache.set_blkno(id, self.sb.fsbtodb(naddr));
        // The buffer may have kept its old pages across a shrink; the grown
        // region must read as zeros, not as whatever those pages held.
        self.cache.data_mut(id)[osize..nsize].fill(0);
        self.vnodes.get_mut(vid).din.db[lbn as usize] = naddr as i32;
        Ok(id)
    }

    /// Zero a freshly allocated indirect block and push it out per `sync`.
    fn fresh_indir(&mut self, addr: i64, sync: bool) -> Result<()> {
        let sector = self.sb.fsbtodb(addr);
        let bsize = self.sb.bsize as usize;
        let mut strat = strat!(self);
        let id = self.cache.getblk(Owner::Dev, sector, bsize, &mut strat)?;
        self.cache.data_mut(id).fill(0);
        let mut strat = strat!(self);
        if sync {
            self.cache.bwrite(id, &mut strat)
        } else {
            self.cache.bdwrite(id);
            Ok(())
        }
    }

    /// Store one pointer into an indirect block and push it out per `sync`.
    fn write_indir_slot(&mut self, sector: i64, off: usize, val: i32, sync: bool) -> Result<()> {
        let bsize = self.sb.bsize as usize;
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, bsize, &mut strat)?;
        self.cache.data_mut(id)[off * 4..off * 4 + 4].copy_from_slice(&val.to_be_bytes());
        let mut strat = strat!(self);
        if sync {
            self.cache.bwrite(id, &mut strat)
        } else {
            self.cache.bdwrite(id);
            Ok(())
        }
    }

    /// Take back the links of a chain that could not be finished, deepest
    /// first, so a failed allocation leaves no trace.
    fn balloc_undo(&mut self, vid: usize, undo: Vec<(i64, UndoPtr)>) {
        let bsize = self.sb.bsize as i64;
        let frags = self.sb.numfrags(bsize as u64);
        for (addr, ptr) in undo.into_iter().rev() {
            match ptr {
                UndoPtr::Ib(k) => self.vnodes.get_mut(vid).din.ib[k] = 0,
                UndoPtr::Slot(sector, off) => {
                    let _ = self.write_indir_slot(sector, off, 0, false);
                }
            }
            self.drop_dev_buf(self.sb.fsbtodb(addr));
            self.blkfree(addr, bsize).expect("undoing an allocation");
            self.vnodes.get_mut(vid).din.blocks -= frags as u32;
            let _ = self.chkdq(vid, -frags, true);
        }
    }

    /// Discard the cache block for freed device-addressed metadata.
    fn drop_dev_buf(&mut self, sector: i64) {
        if self.cache.incore(Owner::Dev, sector).is_some() {
            let bsize = self.sb.bsize as usize;
            let mut strat = strat!(self);
            let id = self
                .cache
                .getblk(Owner::Dev, sector, bsize, &mut strat)
                .expect("freed metadata block busy");
            self.cache.or_flags(id, B_INVALID);
            self.cache.brelse(id);
        }
    }

    /// Set the file to `length` bytes. Growing leaves a hole that reads as
    /// zeros; shrinking zeroes the kept tail, writes the pruned inode, and
    /// only then frees what fell off.
    pub fn itrunc(&mut self, vid: usize, length: u64, sync: bool) -> Result<()> {
        self.ro_check()?;
        if length > self.sb.maxfilesize {
            return Err(FsError::FileTooBig);
        }
        let bsize = self.sb.bsize as usize;
        let (ino, osize, mode, nblocks) = {
            let vn = self.vnodes.get(vid);
            (vn.ino, vn.din.size, vn.din.mode, vn.din.blocks)
        };
        let owner = Owner::File(ino as u64);

        // Short symlinks live in the pointer words; there is no storage.
        if mode & IFMT == IFLNK && osize <= MAXSYMLINKLEN as u64 && nblocks == 0 {
            assert!(length == 0, "shortening a short symlink");
            let vn = self.vnodes.get_mut(vid);
            vn.din.db = [0; NDADDR];
            vn.din.ib = [0; NIADDR];
            vn.din.size = 0;
            vn.iflag |= IN_CHANGE | IN_UPDATE;
            return self.iupdate(vid, WriteHow::Sync);
        }

        if length == osize {
            self.vnodes.get_mut(vid).iflag |= IN_CHANGE | IN_UPDATE;
            return Ok(());
        }

        if length > osize {
            // Nothing is allocated for the gap. Only a trailing fragment
            // run that no longer ends the file is rounded up to cover its
            // block, its new bytes reading as zeros.
            if osize > 0 {
                let t = self.sb.lblkno(osize - 1);
                if t < NDADDR as i64 {
                    let nb = self.vnodes.get(vid).din.db[t as usize] as i64;
                    let cur_alloc = self.sb.blksize(osize, t);
                    let new_alloc = self.sb.blksize(length, t);
                    if nb != 0 && new_alloc > cur_alloc {
                        let id = self.frag_regrow(vid, t, nb, cur_alloc, new_alloc)?;
                        let mut strat = strat!(self);
                        if sync {
                            self.cache.bwrite(id, &mut strat)?;
                        } else {
                            self.cache.bawrite(id, &mut strat)?;
                        }
                    }
                }
            }
            let vn = self.vnodes.get_mut(vid);
            vn.din.size = length;
            vn.iflag |= IN_CHANGE | IN_UPDATE;
            return self.iupdate(vid, WriteHow::Sync);
        }

        // Shrinking. First zero the kept slice of the new last block so a
        // later grow reads zeros, and shrink its buffer to the fragments
        // that will remain.
        let offset = self.sb.blkoff(length);
        let lastblock = self.sb.lblkno(length + bsize as u64 - 1) - 1;
        if offset != 0 {
            if let Some(nb) = self.bmap(vid, lastblock)? {
                let cur_alloc = self.sb.blksize(osize, lastblock);
                let new_alloc = self.sb.blksize(length, lastblock);
                let sector = self.sb.fsbtodb(nb);
                let mut strat = strat!(self);
                let id = self
                    .cache
                    .bread(owner, lastblock, sector, cur_alloc, &mut strat)?;
                self.cache.data_mut(id)[offset as usize..new_alloc].fill(0);
                let mut strat = strat!(self);
                self.cache.allocbuf(id, new_alloc, &mut strat)?;
                let mut strat = strat!(self);
                if sync {
                    self.cache.bwrite(id, &mut strat)?;
                } else {
                    self.cache.bawrite(id, &mut strat)?;
                }
            }
        }

        let nindir = self.sb.nindir as i64;
        let caps = [nindir, nindir * nindir, nindir * nindir * nindir];
        let base = lastblock + 1 - NDADDR as i64;
        let keeps = [
            base.clamp(0, caps[0]),
            (base - caps[0]).clamp(0, caps[1]),
            (base - caps[0] - caps[1]).clamp(0, caps[2]),
        ];
        let (olddb, oldib) = {
            let d = &self.vnodes.get(vid).din;
            (d.db, d.ib)
        };
        {
            let vn = self.vnodes.get_mut(vid);
            for i in 0..NDADDR as i64 {
                if i > lastblock {
                    vn.din.db[i as usize] = 0;
                }
            }
            for (k, &keep) in keeps.iter().enumerate() {
                if keep == 0 {
                    vn.din.ib[k] = 0;
                }
            }
            vn.din.size = length;
            vn.iflag |= IN_CHANGE | IN_UPDATE;
        }
        // The shrunken inode reaches the disk before any block is freed: a
        // crash may strand blocks but never share them.
        self.iupdate(vid, WriteHow::Sync)?;
        self.cache.invalidate_range(owner, lastblock + 1)?;

        let frag = self.sb.numfrags(bsize as u64);
        let mut released: i64 = 0;
        for k in (0..NIADDR).rev() {
            let root = oldib[k] as i64;
            if root == 0 {
                continue;
            }
            if keeps[k] < caps[k] {
                released += self.indirtrunc(root, k as u32 + 1, keeps[k])?;
            }
            if keeps[k] == 0 {
                self.blkfree(root, bsize as i64)?;
                released += frag;
            }
        }
        for i in (0..NDADDR as i64).rev() {
            if i <= lastblock {
                break;
            }
            let bn = olddb[i as usize] as i64;
            if bn == 0 {
                continue;
            }
            let bsz = self.sb.blksize(osize, i);
            self.blkfree(bn, bsz as i64)?;
            released += self.sb.numfrags(bsz as u64);
        }
        // Tail fragments of the kept last block.
        if (0..NDADDR as i64).contains(&lastblock) {
            let bn = olddb[lastblock as usize] as i64;
            if bn != 0 {
                let oldspace = self.sb.blksize(osize, lastblock) as i64;
                let newspace = self.sb.blksize(length, lastblock) as i64;
                assert!(newspace > 0, "itrunc: kept block shrank to nothing");
                if oldspace > newspace {
                    let bno = bn + self.sb.numfrags(newspace as u64);
                    self.blkfree(bno, oldspace - newspace)?;
                    released += self.sb.numfrags((oldspace - newspace) as u64);
                }
            }
        }
        {
            let vn = self.vnodes.get_mut(vid);
            vn.din.blocks = vn.din.blocks.saturating_sub(released as u32);
            vn.iflag |= IN_CHANGE;
        }
        self.chkdq(vid, -released, true)?;
        Ok(())
    }

    /// Free the blocks past the first `keep` file blocks under the
    /// indirect block at `addr` (`level` 1-3). When part of the block
    /// survives, the pruned copy is written out before any child is freed.
    /// Returns fragments released.
    fn indirtrunc(&mut self, addr: i64, level: u32, keep: i64) -> Result<i64> {
        let bsize = self.sb.bsize as usize;
        let nindir = self.sb.nindir as i64;
        let span = nindir.pow(level - 1);
        let sector = self.sb.fsbtodb(addr);
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, bsize, &mut strat)?;
        let ptrs: Vec<i64> = {
            let data = self.cache.data(id);
            (0..nindir as usize)
                .map(|i| i32::from_be_bytes(data[i * 4..i * 4 + 4].try_into().unwrap()) as i64)
                .collect()
        };
        let cut = ((keep + span - 1) / span) as usize;
        if keep > 0 {
            self.cache.data_mut(id)[cut * 4..].fill(0);
            let mut strat = strat!(self);
            self.cache.bwrite(id, &mut strat)?;
        } else {
            // The whole block is going away with its children.
            self.cache.or_flags(id, B_INVALID);
            self.cache.brelse(id);
        }
        let frag = self.sb.numfrags(bsize as u64);
        let mut released = 0i64;
        for &child in ptrs.iter().skip(cut) {
            if child == 0 {
                continue;
            }
            if level > 1 {
                released += self.indirtrunc(child, level - 1, 0)?;
            }
            self.blkfree(child, bsize as i64)?;
            released += frag;
        }
        let partial = keep % span;
        if partial != 0 {
            let child = ptrs[cut - 1];
            if child != 0 {
                released += self.indirtrunc(child, level - 1, partial)?;
            }
        }
        Ok(released)
    }
}
