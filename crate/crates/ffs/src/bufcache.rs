//! Block buffer cache with the classic LRU/AGE replacement policy.
//!
//! The cache owns a fixed arena of `bufpages` pages spread over `nbuf`
//! buffer headers. Pages migrate between headers as block sizes demand;
//! their total never changes. Headers not currently busy sit on exactly one
//! of four free queues: LOCKED (never reclaimed), LRU (valid, reclaimed
//! last), AGE (read-ahead not yet proven useful and invalidated buffers,
//! reclaimed first), and EMPTY (headers holding no pages).
//!
//! Identity is (owner, logical block). Device buffers carry metadata and are
//! addressed by sector; file buffers are addressed by logical block number
//! and learn their physical sector from the mapping step between `getblk`
//! and the first transfer. A delayed-write buffer always knows its sector:
//! the flush that eviction forces cannot stop to ask the file map.
//!
//! The cache never talks to a device itself. Operations that may transfer
//! data take a [`Strategy`], and any completion work runs as soon as the
//! strategy returns, including release of asynchronous buffers. Where the
//! kernel would sleep this code returns [`FsError::WouldBlock`]; unbalanced
//! busy/release discipline panics.

use std::collections::HashMap;

use crate::errors::{FsError, Result};

/// Pages are the granule of buffer memory accounting.
pub const BUF_PAGE: usize = 8192;
/// No filesystem block exceeds this, so no buffer does either.
pub const MAXBSIZE: usize = 65536;
/// Floor on the number of headers regardless of memory size.
pub const MIN_NBUF: usize = 16;

pub const B_AGE: u32 = 0x0000_0001;
pub const B_ASYNC: u32 = 0x0000_0004;
pub const B_BUSY: u32 = 0x0000_0010;
pub const B_DELWRI: u32 = 0x0000_0080;
pub const B_DONE: u32 = 0x0000_0200;
pub const B_ERROR: u32 = 0x0000_0800;
pub const B_INVALID: u32 = 0x0000_2000;
pub const B_LOCKED: u32 = 0x0000_4000;
pub const B_NOCACHE: u32 = 0x0000_8000;
pub const B_CACHE: u32 = 0x0002_0000;
pub const B_READ: u32 = 0x0010_0000;
pub const B_WANTED: u32 = 0x0080_0000;
pub const B_VFLUSH: u32 = 0x0400_0000;

/// Inode number; the key for file-owned buffers.
pub type FileKey = u64;

/// Who a buffer belongs to: the device itself (metadata, indirect blocks)
/// or a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Dev,
    File(FileKey),
}

/// One transfer request handed to a strategy routine. `blkno` is in sectors
/// from the start of the partition.
pub struct Transfer<'a> {
    pub read: bool,
    pub blkno: i64,
    pub data: &'a mut [u8],
}

/// The device half of an I/O operation.
pub trait Strategy {
    fn submit(&mut self, xfer: Transfer<'_>) -> Result<()>;
}

/// Sizing policy: a tenth of a small machine's pages, a twentieth (plus a
/// fixed 2 MB worth) of a large one's. Returns (nbuf, bufpages).
pub fn sizing(physmem: u64) -> (usize, usize) {
    let pages = (physmem / BUF_PAGE as u64) as usize;
    let mut bufpages = if physmem < 2 * 1024 * 1024 {
        pages / 10
    } else {
        (2 * 1024 * 1024 / BUF_PAGE + pages) / 20
    };
    let nbuf = bufpages.max(MIN_NBUF);
    bufpages = bufpages.min(nbuf * (MAXBSIZE / BUF_PAGE));
    (nbuf, bufpages)
}

/// Least power of two that covers `n` hash chains.
pub fn hashinit(n: usize) -> usize {
    n.next_power_of_two()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueId {
    Locked,
    Lru,
    Age,
    Empty,
}

const NQUEUES: usize = 4;

#[derive(Debug, Default, Clone, Copy)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub reads: u64,
    pub readaheads: u64,
    pub writes: u64,
    pub sync_writes: u64,
    pub async_writes: u64,
    pub delayed_writes: u64,
    /// Headers recycled for a new identity.
    pub recycles: u64,
    /// Delayed writes pushed out to free a header.
    pub forced_flushes: u64,
}

#[derive(Debug)]
struct Buf {
    flags: u32,
    owner: Owner,
    lblkno: i64,
    blkno: i64,
    mapped: bool,
    hashed: bool,
    bcount: usize,
    bufsize: usize,
    resid: usize,
    error: Option<FsError>,
    data: Vec<u8>,
    queue: Option<QueueId>,
    prev: Option<usize>,
    next: Option<usize>,
}

#[derive(Debug, Default, Clone, Copy)]
struct FreeList {
    head: Option<usize>,
    tail: Option<usize>,
    len: usize,
}

/// The cache proper.
pub struct BufCache {
    bufs: Vec<Buf>,
    queues: [FreeList; NQUEUES],
    hash: HashMap<(Owner, i64), usize>,
    /// Number of chains a chained table of this capacity would use; reported
    /// by the statistics call.
    pub hash_buckets: usize,
    bufpages: usize,
    numoutput: i64,
    stats: CacheStats,
}

fn qi(q: QueueId) -> usize {
    match q {
        QueueId::Locked => 0,
        QueueId::Lru => 1,
        QueueId::Age => 2,
        QueueId::Empty => 3,
    }
}

impl BufCache {
    /// Build the arena for a machine with `physmem` bytes of memory.
    pub fn with_physmem(physmem: u64) -> BufCache {
        let (nbuf, bufpages) = sizing(physmem);
        BufCache::new(nbuf, bufpages)
    }

    /// Build `nbuf` headers over `bufpages` pages. Pages are dealt out as
    /// evenly as possible, earlier headers taking the remainder; headers
    /// left with no pages start on the EMPTY queue.
    pub fn new(nbuf: usize, bufpages: usize) -> BufCache {
        assert!(nbuf > 0, "bufinit: no buffers");
        let base = bufpages / nbuf;
        let residual = bufpages % nbuf;
        let mut cache = BufCache {
            bufs: Vec::with_capacity(nbuf),
            queues: [FreeList::default(); NQUEUES],
            hash: HashMap::new(),
            hash_buckets: hashinit(nbuf),
            bufpages,
            numoutput: 0,
            stats: CacheStats::default(),
        };
        for i in 0..nbuf {
            let pages = if i < residual { base + 1 } else { base };
            let bufsize = pages * BUF_PAGE;
            cache.bufs.push(Buf {
                flags: B_INVALID,
                owner: Owner::Dev,
                lblkno: 0,
                blkno: -1,
                mapped: false,
                hashed: false,
                bcount: 0,
                bufsize,
                resid: 0,
                error: None,
                data: vec![0; bufsize],
                queue: None,
                prev: None,
                next: None,
            });
            let q = if bufsize > 0 { QueueId::Age } else { QueueId::Empty };
            cache.push_head(q, i);
        }
        cache
    }

    pub fn nbuf(&self) -> usize {
        self.bufs.len()
    }

    pub fn bufpages(&self) -> usize {
        self.bufpages
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn numoutput(&self) -> i64 {
        self.numoutput
    }

    /// Pages currently attached across all headers. Always equals
    /// `bufpages`; pages move, they are never created or destroyed.
    pub fn total_pages(&self) -> usize {
        self.bufs.iter().map(|b| b.bufsize / BUF_PAGE).sum()
    }

    pub fn queue_ids(&self, q: QueueId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.queues[qi(q)].head;
        while let Some(i) = cur {
            out.push(i);
            cur = self.bufs[i].next;
        }
        out
    }

    pub fn queue_len(&self, q: QueueId) -> usize {
        self.queues[qi(q)].len
    }

    pub fn flags(&self, id: usize) -> u32 {
        self.bufs[id].flags
    }

    pub fn or_flags(&mut self, id: usize, bits: u32) {
        self.bufs[id].flags |= bits;
    }

    pub fn clr_flags(&mut self, id: usize, bits: u32) {
        self.bufs[id].flags &= !bits;
    }

    pub fn bcount(&self, id: usize) -> usize {
        self.bufs[id].bcount
    }

    pub fn bufsize(&self, id: usize) -> usize {
        self.bufs[id].bufsize
    }

    pub fn resid(&self, id: usize) -> usize {
        self.bufs[id].resid
    }

    pub fn ident(&self, id: usize) -> (Owner, i64) {
        (self.bufs[id].owner, self.bufs[id].lblkno)
    }

    pub fn blkno(&self, id: usize) -> i64 {
        self.bufs[id].blkno
    }

    /// Valid bytes of a busy buffer.
    pub fn data(&self, id: usize) -> &[u8] {
        let b = &self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "data: buffer not busy");
        &b.data[..b.bcount]
    }

    pub fn data_mut(&mut self, id: usize) -> &mut [u8] {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "data_mut: buffer not busy");
        &mut b.data[..b.bcount]
    }

    /// Record the physical sector a file buffer maps to.
    pub fn set_blkno(&mut self, id: usize, blkno: i64) {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "set_blkno: buffer not busy");
        b.blkno = blkno;
        b.mapped = true;
    }

    pub fn is_mapped(&self, id: usize) -> bool {
        self.bufs[id].mapped
    }

    // Free-list plumbing.

    fn push_head(&mut self, q: QueueId, id: usize) {
        debug_assert!(self.bufs[id].queue.is_none());
        let list = &mut self.queues[qi(q)];
        let old = list.head;
        list.head = Some(id);
        if list.tail.is_none() {
            list.tail = Some(id);
        }
        list.len += 1;
        self.bufs[id].queue = Some(q);
        self.bufs[id].prev = None;
        self.bufs[id].next = old;
        if let Some(o) = old {
            self.bufs[o].prev = Some(id);
        }
    }

    fn push_tail(&mut self, q: QueueId, id: usize) {
        debug_assert!(self.bufs[id].queue.is_none());
        let list = &mut self.queues[qi(q)];
        let old = list.tail;
        list.tail = Some(id);
        if list.head.is_none() {
            list.head = Some(id);
        }
        list.len += 1;
        self.bufs[id].queue = Some(q);
        self.bufs[id].next = None;
        self.bufs[id].prev = old;
        if let Some(o) = old {
            self.bufs[o].next = Some(id);
        }
    }

    fn bremfree(&mut self, id: usize) {
        let q = self.bufs[id].queue.take().expect("bremfree: not on a queue");
        let (prev, next) = (self.bufs[id].prev, self.bufs[id].next);
        match prev {
            Some(p) => self.bufs[p].next = next,
            None => self.queues[qi(q)].head = next,
        }
        match next {
            Some(n) => self.bufs[n].prev = prev,
            None => self.queues[qi(q)].tail = prev,
        }
        self.queues[qi(q)].len -= 1;
        self.bufs[id].prev = None;
        self.bufs[id].next = None;
    }

    fn unhash(&mut self, id: usize) {
        if self.bufs[id].hashed {
            let key = (self.bufs[id].owner, self.bufs[id].lblkno);
            self.hash.remove(&key);
            self.bufs[id].hashed = false;
        }
    }

    /// Look a block up without claiming it.
    pub fn incore(&self, owner: Owner, lblkno: i64) -> Option<usize> {
        self.hash
            .get(&(owner, lblkno))
            .copied()
            .filter(|&id| self.bufs[id].flags & B_INVALID == 0)
    }

    /// Claim the buffer for (owner, lblkno), recycling another header on a
    /// miss. The result is busy and sized to `size`; B_CACHE tells whether
    /// its contents are valid. Device buffers come back mapped.
    pub fn getblk(
        &mut self,
        owner: Owner,
        lblkno: i64,
        size: usize,
        strategy: &mut dyn Strategy,
    ) -> Result<usize> {
        if let Some(id) = self.incore(owner, lblkno) {
            if self.bufs[id].flags & B_BUSY != 0 {
                return Err(FsError::WouldBlock("buffer busy"));
            }
            self.bremfree(id);
            let b = &mut self.bufs[id];
            b.flags |= B_BUSY;
            if b.flags & (B_DONE | B_DELWRI) != 0 {
                b.flags |= B_CACHE;
            } else {
                b.flags &= !B_CACHE;
            }
            self.allocbuf(id, size, strategy)?;
            return Ok(id);
        }
        let id = self.getnewbuf(strategy)?;
        let b = &mut self.bufs[id];
        b.owner = owner;
        b.lblkno = lblkno;
        if owner == Owner::Dev {
            b.blkno = lblkno;
            b.mapped = true;
        }
        b.hashed = true;
        self.hash.insert((owner, lblkno), id);
        self.allocbuf(id, size, strategy)?;
        Ok(id)
    }

    /// Take the oldest reclaimable header: AGE front first, then LRU front,
    /// skipping buffers a flusher is holding. A delayed write found here is
    /// pushed to disk and the hunt restarts.
    fn getnewbuf(&mut self, strategy: &mut dyn Strategy) -> Result<usize> {
        loop {
            let id = self
                .first_reclaimable(QueueId::Age)
                .or_else(|| self.first_reclaimable(QueueId::Lru));
            let Some(id) = id else {
                return Err(FsError::WouldBlock("no free buffers"));
            };
            self.bremfree(id);
            if self.bufs[id].flags & B_DELWRI != 0 {
                self.bufs[id].flags |= B_BUSY | B_AGE;
                self.stats.forced_flushes += 1;
                let _ = self.bawrite(id, strategy);
                continue;
            }
            self.unhash(id);
            let b = &mut self.bufs[id];
            b.flags = B_BUSY;
            b.owner = Owner::Dev;
            b.lblkno = 0;
            b.blkno = -1;
            b.mapped = false;
            b.bcount = 0;
            b.resid = 0;
            b.error = None;
            self.stats.recycles += 1;
            return Ok(id);
        }
    }

    fn first_reclaimable(&self, q: QueueId) -> Option<usize> {
        let mut cur = self.queues[qi(q)].head;
        while let Some(i) = cur {
            if self.bufs[i].flags & B_VFLUSH == 0 {
                return Some(i);
            }
            cur = self.bufs[i].next;
        }
        None
    }

    /// Give a busy buffer exactly `size` valid bytes, stealing pages from
    /// other headers or shedding pages to an empty one as needed. Page
    /// content is preserved only up to the old `bcount`; grown space reads
    /// as zeros.
    pub fn allocbuf(&mut self, id: usize, size: usize, strategy: &mut dyn Strategy) -> Result<()> {
        assert!(size <= MAXBSIZE, "allocbuf: buffer too big");
        assert!(self.bufs[id].flags & B_BUSY != 0, "allocbuf: buffer not busy");
        let desired = size.div_ceil(BUF_PAGE) * BUF_PAGE;
        while self.bufs[id].bufsize < desired {
            let victim = self.getnewbuf(strategy)?;
            self.bufs[victim].flags |= B_INVALID;
            let amt = (desired - self.bufs[id].bufsize).min(self.bufs[victim].bufsize);
            let v = &mut self.bufs[victim];
            v.bufsize -= amt;
            v.data.truncate(v.bufsize);
            v.bcount = v.bcount.min(v.bufsize);
            let b = &mut self.bufs[id];
            b.bufsize += amt;
            b.data.resize(b.bufsize, 0);
            self.brelse(victim);
        }
        if self.bufs[id].bufsize > desired {
            if let Some(e) = self.queues[qi(QueueId::Empty)].head {
                self.bremfree(e);
                let excess = self.bufs[id].bufsize - desired;
                let b = &mut self.bufs[id];
                b.bufsize = desired;
                b.data.truncate(desired);
                let v = &mut self.bufs[e];
                v.flags = B_BUSY | B_INVALID;
                v.bufsize = excess;
                v.data = vec![0; excess];
                v.bcount = 0;
                self.brelse(e);
            }
            // No spare header: the extra pages just stay attached.
        }
        let b = &mut self.bufs[id];
        b.bcount = size;
        if b.data.len() < b.bufsize {
            b.data.resize(b.bufsize, 0);
        }
        Ok(())
    }

    /// Release a busy buffer back to the free lists. Errors and no-cache
    /// requests invalidate; invalid or page-less buffers go to the fronts
    /// (EMPTY or AGE), valid ones to a tail picked by their flags.
    pub fn brelse(&mut self, id: usize) {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "brelse: buffer not busy");
        b.flags &= !B_WANTED;
        if b.flags & B_ERROR != 0 && b.flags & B_LOCKED != 0 {
            // A locked buffer outlives its error; retrying is the owner's
            // problem.
            b.flags &= !B_ERROR;
            b.error = None;
        }
        if b.flags & (B_NOCACHE | B_ERROR) != 0 {
            b.flags |= B_INVALID;
        }
        if b.flags & B_INVALID != 0 || b.bufsize == 0 {
            b.flags &= !B_DELWRI;
            // Identity goes away under the key the buffer is hashed on;
            // resetting the owner first would strand that hash entry.
            self.unhash(id);
            let b = &mut self.bufs[id];
            b.owner = Owner::Dev;
            b.mapped = false;
            let q = if self.bufs[id].bufsize == 0 {
                QueueId::Empty
            } else {
                QueueId::Age
            };
            self.bufs[id].flags &= !(B_AGE | B_ASYNC | B_BUSY | B_NOCACHE);
            self.push_head(q, id);
            return;
        }
        let q = if b.flags & B_LOCKED != 0 {
            QueueId::Locked
        } else if b.flags & B_AGE != 0 {
            QueueId::Age
        } else {
            QueueId::Lru
        };
        b.flags &= !(B_AGE | B_ASYNC | B_BUSY | B_NOCACHE);
        self.push_tail(q, id);
    }

    /// Read (owner, lblkno) at physical `blkno`, `size` bytes. Returns a
    /// busy buffer; on a device error the buffer is released and the error
    /// returned.
    pub fn bread(
        &mut self,
        owner: Owner,
        lblkno: i64,
        blkno: i64,
        size: usize,
        strategy: &mut dyn Strategy,
    ) -> Result<usize> {
        let id = self.getblk(owner, lblkno, size, strategy)?;
        if self.bufs[id].flags & B_CACHE != 0 {
            self.stats.hits += 1;
            return Ok(id);
        }
        self.stats.misses += 1;
        self.set_blkno(id, blkno);
        self.start_read(id, strategy);
        match self.biowait(id) {
            Ok(()) => Ok(id),
            Err(e) => {
                self.brelse(id);
                Err(e)
            }
        }
    }

    /// As [`bread`](Self::bread), and also fire an asynchronous read for one
    /// block ahead unless it is already cached.
    #[allow(clippy::too_many_arguments)]
    pub fn breadn(
        &mut self,
        owner: Owner,
        lblkno: i64,
        blkno: i64,
        size: usize,
        ra: Option<(i64, i64, usize)>,
        strategy: &mut dyn Strategy,
    ) -> Result<usize> {
        let id = self.getblk(owner, lblkno, size, strategy)?;
        let cached = self.bufs[id].flags & B_CACHE != 0;
        if cached {
            self.stats.hits += 1;
        } else {
            self.stats.misses += 1;
            self.set_blkno(id, blkno);
            self.start_read(id, strategy);
        }
        if let Some((ra_lbn, ra_blkno, ra_size)) = ra {
            if self.incore(owner, ra_lbn).is_none() {
                if let Ok(rid) = self.getblk(owner, ra_lbn, ra_size, strategy) {
                    if self.bufs[rid].flags & B_CACHE != 0 {
                        self.brelse(rid);
                    } else {
                        self.stats.readaheads += 1;
                        self.set_blkno(rid, ra_blkno);
                        self.bufs[rid].flags |= B_ASYNC;
                        self.start_read(rid, strategy);
                    }
                }
            }
        }
        if cached {
            return Ok(id);
        }
        match self.biowait(id) {
            Ok(()) => Ok(id),
            Err(e) => {
                self.brelse(id);
                Err(e)
            }
        }
    }

    /// Start the device transfer for a read. Completion (including release
    /// of B_ASYNC buffers) happens before this returns.
    pub fn start_read(&mut self, id: usize, strategy: &mut dyn Strategy) {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "start_read: buffer not busy");
        assert!(b.mapped, "start_read: unmapped buffer");
        b.flags |= B_READ;
        self.stats.reads += 1;
        let r = strategy.submit(Transfer {
            read: true,
            blkno: b.blkno,
            data: &mut b.data[..b.bcount],
        });
        let b = &mut self.bufs[id];
        match r {
            Ok(()) => b.resid = 0,
            Err(e) => {
                b.resid = b.bcount;
                b.flags |= B_ERROR;
                b.error = Some(e);
            }
        }
        self.biodone(id);
    }

    /// Write a busy buffer out. Synchronous unless B_ASYNC is already set;
    /// synchronous writes release the buffer and report the device's answer,
    /// asynchronous ones only start (and in this model also finish) the
    /// transfer.
    pub fn bwrite(&mut self, id: usize, strategy: &mut dyn Strategy) -> Result<()> {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "bwrite: buffer not busy");
        assert!(b.mapped, "bwrite: unmapped buffer");
        let sync = b.flags & B_ASYNC == 0;
        b.flags &= !(B_READ | B_DONE | B_ERROR | B_DELWRI);
        b.error = None;
        self.stats.writes += 1;
        if sync {
            self.stats.sync_writes += 1;
        } else {
            self.stats.async_writes += 1;
        }
        self.numoutput += 1;
        let b = &mut self.bufs[id];
        let r = strategy.submit(Transfer {
            read: false,
            blkno: b.blkno,
            data: &mut b.data[..b.bcount],
        });
        let b = &mut self.bufs[id];
        match r {
            Ok(()) => b.resid = 0,
            Err(e) => {
                b.resid = b.bcount;
                b.flags |= B_ERROR;
                b.error = Some(e);
            }
        }
        self.biodone(id);
        if sync {
            let r = self.biowait(id);
            self.brelse(id);
            r
        } else {
            Ok(())
        }
    }

    /// Start an asynchronous write and return immediately.
    pub fn bawrite(&mut self, id: usize, strategy: &mut dyn Strategy) -> Result<()> {
        self.bufs[id].flags |= B_ASYNC;
        self.bwrite(id, strategy)
    }

    /// Mark the buffer dirty and release it; the data goes to disk when the
    /// buffer is evicted or explicitly flushed.
    pub fn bdwrite(&mut self, id: usize) {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_BUSY != 0, "bdwrite: buffer not busy");
        assert!(b.mapped, "bdwrite: unmapped buffer");
        if b.flags & B_DELWRI == 0 {
            b.flags |= B_DELWRI;
            self.stats.delayed_writes += 1;
        }
        b.flags |= B_DONE;
        self.brelse(id);
    }

    /// Transfer completion. Wakes writers' accounting, releases asynchronous
    /// buffers.
    fn biodone(&mut self, id: usize) {
        let b = &mut self.bufs[id];
        assert!(b.flags & B_DONE == 0, "biodone: buffer already done");
        b.flags |= B_DONE;
        if b.flags & B_READ == 0 {
            self.numoutput -= 1;
            assert!(self.numoutput >= 0, "biodone: negative output count");
        }
        if self.bufs[id].flags & B_ASYNC != 0 {
            self.brelse(id);
        }
    }

    /// Harvest the result of a completed transfer.
    pub fn biowait(&mut self, id: usize) -> Result<()> {
        let b = &mut self.bufs[id];
        assert!(
            b.flags & (B_DONE | B_DELWRI) != 0,
            "biowait: buffer not done"
        );
        if b.flags & B_ERROR != 0 {
            Err(b
                .error
                .take()
                .unwrap_or(FsError::Io(std::io::Error::other("device error"))))
        } else {
            Ok(())
        }
    }

    /// All hashed buffers belonging to `owner`, any state.
    pub fn buffers_of(&self, owner: Owner) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .hash
            .iter()
            .filter(|((o, _), _)| *o == owner)
            .map(|(_, &id)| id)
            .collect();
        ids.sort_by_key(|&id| self.bufs[id].lblkno);
        ids
    }

    pub fn dirty_count(&self, owner: Owner) -> usize {
        self.buffers_of(owner)
            .iter()
            .filter(|&&id| self.bufs[id].flags & B_DELWRI != 0)
            .count()
    }

    /// Push every delayed write belonging to `owner` to disk, synchronously,
    /// in ascending block order.
    pub fn flush_owner(&mut self, owner: Owner, strategy: &mut dyn Strategy) -> Result<()> {
        for id in self.buffers_of(owner) {
            if self.bufs[id].flags & B_DELWRI == 0 {
                continue;
            }
            if self.bufs[id].flags & B_BUSY != 0 {
                return Err(FsError::WouldBlock("buffer busy during flush"));
            }
            self.bremfree(id);
            self.bufs[id].flags |= B_BUSY;
            self.bwrite(id, strategy)?;
        }
        Ok(())
    }

    /// Drop every buffer belonging to `owner`. With `save`, delayed writes
    /// reach the disk first; without it they are discarded.
    pub fn invalidate_owner(
        &mut self,
        owner: Owner,
        save: bool,
        strategy: &mut dyn Strategy,
    ) -> Result<()> {
        if save {
            self.flush_owner(owner, strategy)?;
        }
        for id in self.buffers_of(owner) {
            if self.bufs[id].flags & B_BUSY != 0 {
                return Err(FsError::WouldBlock("buffer busy during invalidate"));
            }
            self.bremfree(id);
            self.bufs[id].flags |= B_BUSY | B_INVALID;
            self.brelse(id);
        }
        Ok(())
    }

    /// Drop cached blocks of `owner` at logical addresses >= `from_lbn`,
    /// discarding any delayed data there (the caller is shrinking the file).
    pub fn invalidate_range(&mut self, owner: Owner, from_lbn: i64) -> Result<()> {
        for id in self.buffers_of(owner) {
            if self.bufs[id].lblkno < from_lbn {
                continue;
            }
            if self.bufs[id].flags & B_BUSY != 0 {
                return Err(FsError::WouldBlock("buffer busy during invalidate"));
            }
            self.bremfree(id);
            self.bufs[id].flags |= B_BUSY | B_INVALID;
            self.brelse(id);
        }
        Ok(())
    }

    /// Push every delayed write in the cache to disk.
    pub fn flush_all(&mut self, strategy: &mut dyn Strategy) -> Result<()> {
        let mut first_err = None;
        for id in 0..self.bufs.len() {
            if self.bufs[id].flags & B_DELWRI == 0 || self.bufs[id].flags & B_BUSY != 0 {
                continue;
            }
            self.bremfree(id);
            self.bufs[id].flags |= B_BUSY;
            if let Err(e) = self.bwrite(id, strategy) {
                first_err.get_or_insert(e);
            }
        }
        match first_err {
            None => Ok(()),
            Some(e) => Err(e),
        }
    }

    pub fn any_dirty(&self) -> bool {
        self.bufs.iter().any(|b| b.flags & B_DELWRI != 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 64-sector in-memory device that can be told to fail one sector.
    struct Mem {
        bytes: Vec<u8>,
        fail_blkno: Option<i64>,
        log: Vec<(bool, i64, usize)>,
    }

    impl Mem {
        fn new(sectors: usize) -> Mem {
            Mem {
                bytes: vec![0; sectors * 512],
                fail_blkno: None,
                log: Vec::new(),
            }
        }
    }

    impl Strategy for Mem {
        fn submit(&mut self, x: Transfer<'_>) -> Result<()> {
            self.log.push((x.read, x.blkno, x.data.len()));
            if Some(x.blkno) == self.fail_blkno {
                return Err(FsError::Io(std::io::Error::other("injected")));
            }
            let off = x.blkno as usize * 512;
            if x.read {
                x.data.copy_from_slice(&self.bytes[off..off + x.data.len()]);
            } else {
                self.bytes[off..off + x.data.len()].copy_from_slice(x.data);
            }
            Ok(())
        }
    }

    #[test]
    fn a_dropped_identity_leaves_no_stale_alias() {
        let mut cache = BufCache::new(16, 12);
        let mut dev = Mem::new(64);
        // A file buffer gains an identity, then has it revoked.
        let a = cache.getblk(Owner::File(7), 5, 512, &mut dev).unwrap();
        cache.set_blkno(a, 40);
        cache.or_flags(a, B_INVALID);
        cache.brelse(a);
        assert_eq!(cache.incore(Owner::File(7), 5), None);

        // Recycling the slot under a new identity must not revive the old
        // one: a stale hash entry would alias a buffer holding other data.
        let b = cache.getblk(Owner::Dev, 40, 512, &mut dev).unwrap();
        assert_eq!(b, a, "invalidated buffer should be first in line");
        cache.brelse(b);
        assert_eq!(
            cache.incore(Owner::File(7), 5),
            None,
            "revoked identity came back as an alias"
        );
        assert_eq!(cache.incore(Owner::Dev, 40), Some(b));
    }

    #[test]
    fn sizing_splits_memory_by_machine_class() {
        // Large machine: a twentieth of memory plus a fixed 2 MB worth.
        assert_eq!(sizing(128 << 20), (832, 832));
        // Small machine: a tenth, and the header floor kicks in.
        assert_eq!(sizing(1 << 20), (16, 12));
        assert_eq!(sizing(2 << 20), (25, 25));
        assert_eq!(sizing(8 << 20), (64, 64));
    }

    #[test]
    fn hashinit_rounds_up_to_a_power_of_two() {
        assert_eq!(hashinit(1), 1);
        assert_eq!(hashinit(16), 16);
        assert_eq!(hashinit(169), 256);
        assert_eq!(hashinit(832), 1024);
        assert_eq!(hashinit(1354), 2048);
    }

    #[test]
    fn init_deals_pages_and_queues() {
        let c = BufCache::new(16, 12);
        assert_eq!(c.total_pages(), 12);
        assert_eq!(c.queue_len(QueueId::Age), 12);
        assert_eq!(c.queue_len(QueueId::Empty), 4);
        // Head insertion during setup leaves the last-created header first.
        assert_eq!(c.queue_ids(QueueId::Age)[0], 11);
        assert_eq!(c.queue_ids(QueueId::Empty)[0], 15);
        for id in 0..12 {
            assert_eq!(c.bufsize(id), BUF_PAGE);
        }
        for id in 12..16 {
            assert_eq!(c.bufsize(id), 0);
        }
    }

    #[test]
    fn read_miss_then_hit() {
        let mut dev = Mem::new(64);
        dev.bytes[2 * 512..2 * 512 + 4].copy_from_slice(b"wxyz");
        let mut c = BufCache::new(4, 4);
        let id = c.bread(Owner::Dev, 2, 2, 1024, &mut dev).unwrap();
        assert_eq!(&c.data(id)[..4], b"wxyz");
        c.brelse(id);
        let id2 = c.bread(Owner::Dev, 2, 2, 1024, &mut dev).unwrap();
        assert_eq!(id, id2);
        assert_eq!(c.stats().hits, 1);
        assert_eq!(c.stats().misses, 1);
        assert_eq!(dev.log.len(), 1);
        c.brelse(id2);
    }

    #[test]
    fn release_order_feeds_reclaim_order() {
        let mut dev = Mem::new(256);
        let mut c = BufCache::new(3, 3);
        let a = c.bread(Owner::Dev, 10, 10, 8192, &mut dev).unwrap();
        c.brelse(a);
        let b = c.bread(Owner::Dev, 20, 20, 8192, &mut dev).unwrap();
        c.brelse(b);
        let d = c.bread(Owner::Dev, 30, 30, 8192, &mut dev).unwrap();
        c.brelse(d);
        // All three now sit on LRU in release order; a fourth identity
        // recycles the oldest, which held sector 10.
        let e = c.bread(Owner::Dev, 40, 40, 8192, &mut dev).unwrap();
        assert_eq!(e, a);
        assert!(c.incore(Owner::Dev, 10).is_none());
        assert!(c.incore(Owner::Dev, 20).is_some());
        c.brelse(e);
    }

    #[test]
    fn age_queue_is_reclaimed_before_lru() {
        let mut dev = Mem::new(256);
        let mut c = BufCache::new(3, 3);
        for s in [10i64, 20, 30] {
            let id = c.bread(Owner::Dev, s, s, 8192, &mut dev).unwrap();
            c.brelse(id);
        }
        // Re-release sector 20 with B_AGE: it jumps the reclaim line.
        let b = c.bread(Owner::Dev, 20, 20, 8192, &mut dev).unwrap();
        c.or_flags(b, B_AGE);
        c.brelse(b);
        let d = c.getblk(Owner::Dev, 40, 8192, &mut dev).unwrap();
        // The AGE resident went first even though sector 10 is older.
        assert_eq!(d, b);
        assert!(c.incore(Owner::Dev, 10).is_some());
        assert!(c.incore(Owner::Dev, 20).is_none());
        c.brelse(d);
    }

    #[test]
    fn delayed_write_reaches_disk_only_on_eviction() {
        let mut dev = Mem::new(256);
        let mut c = BufCache::new(2, 2);
        let id = c.getblk(Owner::Dev, 4, 1024, &mut dev).unwrap();
        c.data_mut(id).copy_from_slice(&[7u8; 1024]);
        c.bdwrite(id);
        assert_eq!(dev.log.len(), 0);
        assert!(c.any_dirty());
        // Two new identities force the dirty buffer out.
        let x = c.getblk(Owner::Dev, 8, 8192, &mut dev).unwrap();
        let y = c.getblk(Owner::Dev, 16, 8192, &mut dev).unwrap();
        assert!(dev.log.contains(&(false, 4, 1024)));
        assert_eq!(dev.bytes[4 * 512], 7);
        assert_eq!(c.stats().forced_flushes, 1);
        c.brelse(x);
        c.brelse(y);
    }

    #[test]
    fn dirty_buffer_rereads_from_cache_not_disk() {
        let mut dev = Mem::new(64);
        let mut c = BufCache::new(4, 4);
        let id = c.getblk(Owner::Dev, 4, 512, &mut dev).unwrap();
        c.data_mut(id).copy_from_slice(&[9u8; 512]);
        c.bdwrite(id);
        let id2 = c.bread(Owner::Dev, 4, 4, 512, &mut dev).unwrap();
        assert_eq!(c.data(id2), &[9u8; 512][..]);
        assert_eq!(c.stats().hits, 1);
        assert!(dev.log.is_empty());
        c.brelse(id2);
    }

    #[test]
    fn error_invalidates_and_releases() {
        let mut dev = Mem::new(64);
        dev.fail_blkno = Some(8);
        let mut c = BufCache::new(4, 4);
        let e = c.bread(Owner::Dev, 8, 8, 512, &mut dev);
        assert!(e.is_err());
        assert!(c.incore(Owner::Dev, 8).is_none());
        // The header went back to the AGE front, still holding its pages.
        assert_eq!(c.total_pages(), 4);
    }

    #[test]
    fn nocache_release_invalidates() {
        let mut dev = Mem::new(64);
        let mut c = BufCache::new(4, 4);
        let id = c.bread(Owner::Dev, 8, 8, 512, &mut dev).unwrap();
        c.or_flags(id, B_NOCACHE);
        c.brelse(id);
        assert!(c.incore(Owner::Dev, 8).is_none());
    }

    #[test]
    fn locked_buffers_are_never_reclaimed() {
        let mut dev = Mem::new(256);
        let mut c = BufCache::new(2, 2);
        let id = c.bread(Owner::Dev, 8, 8, 8192, &mut dev).unwrap();
        c.or_flags(id, B_LOCKED);
        c.brelse(id);
        assert_eq!(c.queue_len(QueueId::Locked), 1);
        let a = c.getblk(Owner::Dev, 16, 8192, &mut dev).unwrap();
        assert_ne!(a, id);
        // Only one unlocked header remains; a third identity cannot be had.
        let b = c.getblk(Owner::Dev, 24, 8192, &mut dev);
        assert!(matches!(b, Err(FsError::WouldBlock(_))));
        c.brelse(a);
        assert!(c.incore(Owner::Dev, 8).is_some());
    }

    #[test]
    fn allocbuf_conserves_pages() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(16, 12);
        let id = c.getblk(Owner::Dev, 2, 512, &mut dev).unwrap();
        assert_eq!(c.bufsize(id), BUF_PAGE);
        c.allocbuf(id, 4 * BUF_PAGE, &mut dev).unwrap();
        assert_eq!(c.bufsize(id), 4 * BUF_PAGE);
        assert_eq!(c.bcount(id), 4 * BUF_PAGE);
        assert_eq!(c.total_pages(), 12);
        // Shrinking hands the excess to an empty header, which becomes a
        // sized resident of the AGE queue.
        c.allocbuf(id, BUF_PAGE, &mut dev).unwrap();
        assert_eq!(c.bufsize(id), BUF_PAGE);
        assert_eq!(c.total_pages(), 12);
        assert_eq!(c.bufsize(c.queue_ids(QueueId::Age)[0]), 3 * BUF_PAGE);
        c.brelse(id);
    }

    #[test]
    fn grown_space_reads_zero() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(8, 8);
        let id = c.getblk(Owner::Dev, 2, 512, &mut dev).unwrap();
        c.data_mut(id).copy_from_slice(&[3u8; 512]);
        c.allocbuf(id, 2 * BUF_PAGE, &mut dev).unwrap();
        assert_eq!(&c.data(id)[..512], &[3u8; 512][..]);
        assert!(c.data(id)[BUF_PAGE..].iter().all(|&b| b == 0));
        c.brelse(id);
    }

    #[test]
    fn readahead_turns_the_next_read_into_a_hit() {
        let mut dev = Mem::new(256);
        dev.bytes[16 * 512] = 0xaa;
        let mut c = BufCache::new(8, 8);
        let id = c
            .breadn(Owner::Dev, 8, 8, 2048, Some((16, 16, 2048)), &mut dev)
            .unwrap();
        c.brelse(id);
        assert_eq!(c.stats().readaheads, 1);
        assert_eq!(dev.log.len(), 2);
        let id2 = c.bread(Owner::Dev, 16, 16, 2048, &mut dev).unwrap();
        assert_eq!(c.data(id2)[0], 0xaa);
        assert_eq!(c.stats().hits, 1);
        assert_eq!(dev.log.len(), 2);
        c.brelse(id2);
    }

    #[test]
    fn flush_owner_writes_dirty_blocks_in_order() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(8, 8);
        for lbn in [5i64, 1, 3] {
            let id = c
                .getblk(Owner::File(7), lbn, 1024, &mut dev)
                .unwrap();
            c.set_blkno(id, lbn * 2);
            c.bdwrite(id);
        }
        assert_eq!(c.dirty_count(Owner::File(7)), 3);
        c.flush_owner(Owner::File(7), &mut dev).unwrap();
        assert_eq!(c.dirty_count(Owner::File(7)), 0);
        let writes: Vec<i64> = dev.log.iter().map(|&(_, b, _)| b).collect();
        assert_eq!(writes, vec![2, 6, 10]);
        // Flushed buffers stay cached and clean.
        assert!(c.incore(Owner::File(7), 5).is_some());
    }

    #[test]
    fn invalidate_owner_discards_without_save() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(8, 8);
        let id = c.getblk(Owner::File(7), 0, 1024, &mut dev).unwrap();
        c.set_blkno(id, 0);
        c.bdwrite(id);
        c.invalidate_owner(Owner::File(7), false, &mut dev).unwrap();
        assert!(dev.log.is_empty());
        assert!(c.incore(Owner::File(7), 0).is_none());
        assert!(!c.any_dirty());
    }

    #[test]
    fn invalidate_range_spares_earlier_blocks() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(8, 8);
        for lbn in 0..4i64 {
            let id = c.bread(Owner::File(9), lbn, lbn * 2, 1024, &mut dev).unwrap();
            c.brelse(id);
        }
        c.invalidate_range(Owner::File(9), 2).unwrap();
        assert!(c.incore(Owner::File(9), 0).is_some());
        assert!(c.incore(Owner::File(9), 1).is_some());
        assert!(c.incore(Owner::File(9), 2).is_none());
        assert!(c.incore(Owner::File(9), 3).is_none());
    }

    #[test]
    fn write_failure_surfaces_and_invalidates() {
        let mut dev = Mem::new(64);
        dev.fail_blkno = Some(4);
        let mut c = BufCache::new(4, 4);
        let id = c.getblk(Owner::Dev, 4, 512, &mut dev).unwrap();
        assert!(c.bwrite(id, &mut dev).is_err());
        assert!(c.incore(Owner::Dev, 4).is_none());
        assert_eq!(c.numoutput(), 0);
    }

    #[test]
    #[should_panic(expected = "brelse: buffer not busy")]
    fn double_release_panics() {
        let mut dev = Mem::new(64);
        let mut c = BufCache::new(4, 4);
        let id = c.getblk(Owner::Dev, 4, 512, &mut dev).unwrap();
        c.brelse(id);
        c.brelse(id);
    }

    #[test]
    #[should_panic(expected = "bdwrite: unmapped buffer")]
    fn delayed_write_requires_a_mapping() {
        let mut dev = Mem::new(64);
        let mut c = BufCache::new(4, 4);
        let id = c.getblk(Owner::File(3), 0, 512, &mut dev).unwrap();
        c.bdwrite(id);
    }

    #[test]
    fn busy_hit_would_block() {
        let mut dev = Mem::new(64);
        let mut c = BufCache::new(4, 4);
        let id = c.getblk(Owner::Dev, 4, 512, &mut dev).unwrap();
        assert!(matches!(
            c.getblk(Owner::Dev, 4, 512, &mut dev),
            Err(FsError::WouldBlock(_))
        ));
        c.brelse(id);
    }

    #[test]
    fn resize_on_hit_keeps_identity() {
        let mut dev = Mem::new(1024);
        let mut c = BufCache::new(8, 8);
        let id = c.bread(Owner::File(1), 0, 8, 3072, &mut dev).unwrap();
        c.brelse(id);
        let id2 = c.getblk(Owner::File(1), 0, 8192, &mut dev).unwrap();
        assert_eq!(id, id2);
        assert_eq!(c.bcount(id2), 8192);
        assert!(c.flags(id2) & B_CACHE != 0);
        c.brelse(id2);
    }
}
