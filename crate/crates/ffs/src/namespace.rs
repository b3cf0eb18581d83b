//! Directories, path lookup, the in-core inode (vnode) table, and the name
//! cache.
//!
//! The vnode table is a fixed-capacity slab. An inode stays in core while
//! its use count is positive; at zero it parks on the free list (tail) or,
//! while buffers still reference it, on the hold list. New activations
//! recycle the free list's head, so a vnode whose contents became worthless
//! is pushed on the front and one that may be wanted again goes to the back.
//!
//! The name cache maps (directory, capability, component) to a child and its
//! capability. Capabilities are bumped whenever a directory mutates or a
//! vnode changes identity, which invalidates every cached edge touching it
//! without walking the cache; stale entries age out through the LRU list.

use std::collections::HashMap;

use crate::layout::Dinode;

const NPROC: usize = 20 + 16 * 64;
const NTEXT: usize = 80 + NPROC / 8;
/// In-core inode table capacity; also the name cache capacity.
pub const DESIREDVNODES: usize = NPROC + NTEXT + 100;

/// In-core inode state flags.
pub const IN_ACCESS: u32 = 0x0001;
pub const IN_CHANGE: u32 = 0x0002;
pub const IN_UPDATE: u32 = 0x0004;
pub const IN_MODIFIED: u32 = 0x0008;
pub const IN_RENAME: u32 = 0x0020;

/// An active or cached in-core inode.
#[derive(Debug)]
pub struct Vnode {
    pub ino: u32,
    pub din: Dinode,
    pub iflag: u32,
    pub usecount: i32,
    pub holdcnt: i32,
    /// Per-quota-type attachment into the quota table.
    pub(crate) dq: [Option<usize>; 2],
}

impl Vnode {
    fn new(ino: u32, din: Dinode) -> Vnode {
        Vnode {
            ino,
            din,
            iflag: 0,
            usecount: 0,
            holdcnt: 0,
            dq: [None, None],
        }
    }

    /// Fold the pending time flags into the dinode timestamps and clear
    /// them. Returns whether the dinode now needs a disk write.
    pub(crate) fn fold_times(&mut self, sec: i32, nsec: i32) -> bool {
        const DIRTY: u32 = IN_ACCESS | IN_CHANGE | IN_UPDATE | IN_MODIFIED;
        if self.iflag & DIRTY == 0 {
            return false;
        }
        if self.iflag & IN_ACCESS != 0 {
            self.din.atime = sec;
            self.din.atimensec = nsec;
        }
        if self.iflag & IN_UPDATE != 0 {
            self.din.mtime = sec;
            self.din.mtimensec = nsec;
        }
        if self.iflag & IN_CHANGE != 0 {
            self.din.ctime = sec;
            self.din.ctimensec = nsec;
        }
        self.iflag &= !DIRTY;
        true
    }
}

#[derive(Debug)]
struct Slot {
    vn: Option<Vnode>,
    /// Identity capability; bumped on reuse and on directory mutation.
    cap: u32,
}

/// Where an inactive slot currently waits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Park {
    Active,
    Free,
    Hold,
}

pub struct VnodeTable {
    slots: Vec<Slot>,
    park: Vec<Park>,
    by_ino: HashMap<u32, usize>,
    /// Inactive, reusable slots in recycle order.
    free: std::collections::VecDeque<usize>,
    /// Inactive slots pinned by a hold count.
    hold: Vec<usize>,
    desired: usize,
    next_cap: u32,
}

impl Default for VnodeTable {
    fn default() -> Self {
        Self::new()
    }
}

impl VnodeTable {
    pub fn new() -> VnodeTable {
        VnodeTable::with_capacity(DESIREDVNODES)
    }

    pub fn with_capacity(desired: usize) -> VnodeTable {
        VnodeTable {
            slots: Vec::new(),
            park: Vec::new(),
            by_ino: HashMap::new(),
            free: std::collections::VecDeque::new(),
            hold: Vec::new(),
            desired,
            next_cap: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cap(&self, vid: usize) -> u32 {
        self.slots[vid].cap
    }

    /// Invalidate every cached name edge touching this vnode.
    pub fn bump_cap(&mut self, vid: usize) {
        self.next_cap += 1;
        self.slots[vid].cap = self.next_cap;
    }

    pub fn lookup(&self, ino: u32) -> Option<usize> {
        self.by_ino.get(&ino).copied()
    }

    pub fn get(&self, vid: usize) -> &Vnode {
        self.slots[vid].vn.as_ref().expect("vnode: empty slot")
    }

    pub fn get_mut(&mut self, vid: usize) -> &mut Vnode {
        self.slots[vid].vn.as_mut().expect("vnode: empty slot")
    }

    pub fn ino_of(&self, vid: usize) -> u32 {
        self.get(vid).ino
    }

    /// Reactivate a cached vnode: pull it off whatever inactive list holds
    /// it and count a use.
    pub fn vget(&mut self, vid: usize) {
        match self.park[vid] {
            Park::Active => {}
            Park::Free => {
                let pos = self
                    .free
                    .iter()
                    .position(|&v| v == vid)
                    .expect("vget: not on free list");
                self.free.remove(pos);
                self.park[vid] = Park::Active;
            }
            Park::Hold => {
                let pos = self
                    .hold
                    .iter()
                    .position(|&v| v == vid)
                    .expect("vget: not on hold list");
                self.hold.remove(pos);
                self.park[vid] = Park::Active;
            }
        }
        self.get_mut(vid).usecount += 1;
    }

    /// Count another use of an already-active vnode.
    pub fn vref(&mut self, vid: usize) {
        let vn = self.get_mut(vid);
        assert!(vn.usecount > 0, "vref: inactive vnode");
        vn.usecount += 1;
    }

    /// Drop a use. Returns true when the vnode just became inactive, which
    /// is the caller's cue to run its deactivation work; the slot then waits
    /// on the free list tail (or the hold list while buffers pin it).
    pub fn vrele(&mut self, vid: usize) -> bool {
        let vn = self.get_mut(vid);
        assert!(vn.usecount > 0, "vrele: usecount underflow");
        vn.usecount -= 1;
        if vn.usecount > 0 {
            return false;
        }
        if vn.holdcnt > 0 {
            self.park[vid] = Park::Hold;
            self.hold.push(vid);
        } else {
            self.park[vid] = Park::Free;
            self.free.push_back(vid);
        }
        true
    }

    pub fn vhold(&mut self, vid: usize) {
        self.get_mut(vid).holdcnt += 1;
        if self.park[vid] == Park::Free {
            let pos = self.free.iter().position(|&v| v == vid).unwrap();
            self.free.remove(pos);
            self.park[vid] = Park::Hold;
            self.hold.push(vid);
        }
    }

    pub fn holdrele(&mut self, vid: usize) {
        let vn = self.get_mut(vid);
        assert!(vn.holdcnt > 0, "holdrele: holdcnt underflow");
        vn.holdcnt -= 1;
        if vn.holdcnt == 0 && self.park[vid] == Park::Hold {
            let pos = self.hold.iter().position(|&v| v == vid).unwrap();
            self.hold.remove(pos);
            self.park[vid] = Park::Free;
            self.free.push_back(vid);
        }
    }

    /// An inactive vnode whose contents are worthless goes to the recycle
    /// front.
    pub fn vrecycle_front(&mut self, vid: usize) {
        assert_eq!(self.park[vid], Park::Free, "vrecycle: vnode not on free list");
        let pos = self.free.iter().position(|&v| v == vid).unwrap();
        self.free.remove(pos);
        self.free.push_front(vid);
    }

    /// Claim a slot for a new identity. Below capacity that is a fresh
    /// slot; at capacity the free list head is evicted and handed back so
    /// the caller can write out and dissociate the old inode first.
    pub fn getnewvnode(&mut self) -> Result<NewVnode, crate::errors::FsError> {
        if self.slots.len() < self.desired {
            self.slots.push(Slot { vn: None, cap: 0 });
            self.park.push(Park::Active);
            Ok(NewVnode::Fresh(self.slots.len() - 1))
        } else {
            let Some(vid) = self.free.pop_front() else {
                return Err(crate::errors::FsError::WouldBlock("out of vnodes"));
            };
            self.park[vid] = Park::Active;
            let old = self.slots[vid].vn.take().expect("free slot without vnode");
            self.by_ino.remove(&old.ino);
            Ok(NewVnode::Recycled(vid, old))
        }
    }

    /// Give a claimed slot its identity; the vnode starts with one use.
    pub fn install(&mut self, vid: usize, ino: u32, din: Dinode) {
        assert!(self.slots[vid].vn.is_none(), "install: slot occupied");
        let mut vn = Vnode::new(ino, din);
        vn.usecount = 1;
        self.slots[vid].vn = Some(vn);
        self.bump_cap(vid);
        self.park[vid] = Park::Active;
        let prev = self.by_ino.insert(ino, vid);
        assert!(prev.is_none(), "install: inode already in core");
    }

    /// Strip a slot's identity entirely (unmount, or eviction of an inode
    /// whose disk form is gone). The slot returns to the recycle front.
    pub fn unhash(&mut self, vid: usize) -> Vnode {
        let vn = self.slots[vid].vn.take().expect("unhash: empty slot");
        self.by_ino.remove(&vn.ino);
        self.bump_cap(vid);
        match self.park[vid] {
            Park::Free => {
                let pos = self.free.iter().position(|&v| v == vid).unwrap();
                self.free.remove(pos);
            }
            Park::Hold => {
                let pos = self.hold.iter().position(|&v| v == vid).unwrap();
                self.hold.remove(pos);
            }
            Park::Active => {}
        }
        self.park[vid] = Park::Free;
        self.free.push_front(vid);
        vn
    }

    /// Every slot currently holding an inode, active or cached.
    pub fn resident_vids(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&v| self.slots[v].vn.is_some())
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.vn.as_ref().is_some_and(|v| v.usecount > 0))
            .count()
    }

    pub fn free_len(&self) -> usize {
        self.free.len()
    }

    pub fn hold_len(&self) -> usize {
        self.hold.len()
    }
}

/// What `getnewvnode` handed out.
pub enum NewVnode {
    Fresh(usize),
    /// Slot plus the evicted inode the caller must clean up.
    Recycled(usize, Vnode),
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NcStats {
    pub goodhits: u64,
    pub neghits: u64,
    /// Hits whose target turned out stale.
    pub badhits: u64,
    pub misses: u64,
    pub evictions: u64,
}

pub enum NcLookup {
    Found(usize, u32),
    Negative,
    Miss,
}

#[derive(Debug)]
struct NcEntry {
    dvid: usize,
    dcap: u32,
    name: Vec<u8>,
    /// Some(child vid, child cap) for real edges, None for cached ENOENT.
    child: Option<(usize, u32)>,
    prev: Option<usize>,
    next: Option<usize>,
}

/// LRU name cache. Capacity matches the vnode table so every resident
/// directory edge can stay cached.
pub struct NameCache {
    map: HashMap<(usize, u32, Vec<u8>), usize>,
    entries: Vec<Option<NcEntry>>,
    free_slots: Vec<usize>,
    head: Option<usize>,
    tail: Option<usize>,
    capacity: usize,
    stats: NcStats,
}

impl Default for NameCache {
    fn default() -> Self {
        Self::new()
    }
}

impl NameCache {
    pub fn new() -> NameCache {
        NameCache::with_capacity(DESIREDVNODES)
    }

    pub fn with_capacity(capacity: usize) -> NameCache {
        NameCache {
            map: HashMap::new(),
            entries: Vec::new(),
            free_slots: Vec::new(),
            head: None,
            tail: None,
            capacity,
            stats: NcStats::default(),
        }
    }

    pub fn stats(&self) -> NcStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Hash-chain counts a chained implementation of this capacity would
    /// use, for the statistics report.
    pub fn bucket_counts(&self) -> (usize, usize) {
        (
            crate::bufcache::hashinit(self.capacity),
            crate::bufcache::hashinit(self.capacity / 8),
        )
    }

    fn detach(&mut self, idx: usize) {
        let (prev, next) = {
            let e = self.entries[idx].as_ref().unwrap();
            (e.prev, e.next)
        };
        match prev {
            Some(p) => self.entries[p].as_mut().unwrap().next = next,
            None => self.head = next,
        }
        match next {
            Some(n) => self.entries[n].as_mut().unwrap().prev = prev,
            None => self.tail = prev,
        }
    }

    fn attach_tail(&mut self, idx: usize) {
        let old = self.tail;
        self.tail = Some(idx);
        {
            let e = self.entries[idx].as_mut().unwrap();
            e.prev = old;
            e.next = None;
        }
        match old {
            Some(o) => self.entries[o].as_mut().unwrap().next = Some(idx),
            None => self.head = Some(idx),
        }
    }

    fn remove_entry(&mut self, idx: usize) {
        self.detach(idx);
        let e = self.entries[idx].take().unwrap();
        self.map.remove(&(e.dvid, e.dcap, e.name));
        self.free_slots.push(idx);
    }

    pub fn lookup(&mut self, dvid: usize, dcap: u32, name: &[u8]) -> NcLookup {
        let key = (dvid, dcap, name.to_vec());
        match self.map.get(&key) {
            Some(&idx) => {
                self.detach(idx);
                self.attach_tail(idx);
                match self.entries[idx].as_ref().unwrap().child {
                    Some((cvid, ccap)) => {
                        self.stats.goodhits += 1;
                        NcLookup::Found(cvid, ccap)
                    }
                    None => {
                        self.stats.neghits += 1;
                        NcLookup::Negative
                    }
                }
            }
            None => {
                self.stats.misses += 1;
                NcLookup::Miss
            }
        }
    }

    /// The caller found a hit's target stale: drop the entry and correct
    /// the score.
    pub fn note_bad(&mut self, dvid: usize, dcap: u32, name: &[u8]) {
        let key = (dvid, dcap, name.to_vec());
        if let Some(&idx) = self.map.get(&key) {
            self.remove_entry(idx);
        }
        self.stats.goodhits -= 1;
        self.stats.badhits += 1;
    }

    pub fn enter(&mut self, dvid: usize, dcap: u32, name: &[u8], child: Option<(usize, u32)>) {
        let key = (dvid, dcap, name.to_vec());
        if let Some(&idx) = self.map.get(&key) {
            self.entries[idx].as_mut().unwrap().child = child;
            self.detach(idx);
            self.attach_tail(idx);
            return;
        }
        if self.map.len() >= self.capacity {
            if let Some(h) = self.head {
                self.remove_entry(h);
                self.stats.evictions += 1;
            }
        }
        let entry = NcEntry {
            dvid,
            dcap,
            name: name.to_vec(),
            child,
            prev: None,
            next: None,
        };
        let idx = match self.free_slots.pop() {
            Some(i) => {
                self.entries[i] = Some(entry);
                i
            }
            None => {
                self.entries.push(Some(entry));
                self.entries.len() - 1
            }
        };
        self.map.insert(key, idx);
        self.attach_tail(idx);
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.entries.clear();
        self.free_slots.clear();
        self.head = None;
        self.tail = None;
    }
}
