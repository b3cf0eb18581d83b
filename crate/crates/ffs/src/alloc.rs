//! Block, fragment, and inode allocation.
//!
//! Global policy picks a preferred address (inode group for new files,
//! previous block + one for sequential writes); local routines then take
//! the preference when free or the nearest alternative in that group,
//! overflowing to other groups by quadratic hash and finally brute force.
//! Every transition updates three ledgers in lockstep: the group header,
//! the in-core summary array, and the filesystem totals.

use crate::errors::{FsError, Result};
use crate::fs::{Fs, WriteHow};
use crate::layout::{
    clrbit, clrblock, isblock, isset, setbit, setblock, Csum, CylGroup, Dinode, Superblock,
    FS_OPTSPACE, FS_OPTTIME, MAXFRAG, NDADDR,
};
use crate::namespace::{IN_CHANGE, IN_UPDATE};

/// Fragment run summary for 1, 2, and 4 fragments per block, packed into
/// one table: bit 1 flags a full block of one fragment, bits 2-3 flag
/// maximal runs of exactly 1-2 of two, bits 4-7 runs of exactly 1-4 of four.
pub const FRAGTBL124: [u8; 256] = [
    0x00, 0x16, 0x16, 0x2a, 0x16, 0x16, 0x26, 0x4e,
    0x16, 0x16, 0x16, 0x3e, 0x2a, 0x3e, 0x4e, 0x8a,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x2a, 0x3e, 0x3e, 0x2a, 0x3e, 0x3e, 0x2e, 0x6e,
    0x3e, 0x3e, 0x3e, 0x3e, 0x2a, 0x3e, 0x6e, 0xaa,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x26, 0x36, 0x36, 0x2e, 0x36, 0x36, 0x26, 0x6e,
    0x36, 0x36, 0x36, 0x3e, 0x2e, 0x3e, 0x6e, 0xae,
    0x4e, 0x5e, 0x5e, 0x6e, 0x5e, 0x5e, 0x6e, 0x4e,
    0x5e, 0x5e, 0x5e, 0x7e, 0x6e, 0x7e, 0x4e, 0xce,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x16, 0x16, 0x16, 0x3e, 0x16, 0x16, 0x36, 0x5e,
    0x16, 0x16, 0x16, 0x3e, 0x3e, 0x3e, 0x5e, 0x9e,
    0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x7e,
    0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x7e, 0xbe,
    0x2a, 0x3e, 0x3e, 0x2a, 0x3e, 0x3e, 0x2e, 0x6e,
    0x3e, 0x3e, 0x3e, 0x3e, 0x2a, 0x3e, 0x6e, 0xaa,
    0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x7e,
    0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x3e, 0x7e, 0xbe,
    0x4e, 0x5e, 0x5e, 0x6e, 0x5e, 0x5e, 0x6e, 0x4e,
    0x5e, 0x5e, 0x5e, 0x7e, 0x6e, 0x7e, 0x4e, 0xce,
    0x8a, 0x9e, 0x9e, 0xaa, 0x9e, 0x9e, 0xae, 0xce,
    0x9e, 0x9e, 0x9e, 0xbe, 0xaa, 0xbe, 0xce, 0x8a,
];

/// Fragment run summary for 8 fragments per block: bit s-1 flags a maximal
/// run of exactly s free fragments somewhere in the byte.
pub const FRAGTBL8: [u8; 256] = [
    0x00, 0x01, 0x01, 0x02, 0x01, 0x01, 0x02, 0x04,
    0x01, 0x01, 0x01, 0x03, 0x02, 0x03, 0x04, 0x08,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x02, 0x03, 0x03, 0x02, 0x04, 0x05, 0x08, 0x10,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x01, 0x01, 0x01, 0x03, 0x03, 0x03, 0x05, 0x09,
    0x02, 0x03, 0x03, 0x02, 0x03, 0x03, 0x02, 0x06,
    0x04, 0x05, 0x05, 0x06, 0x08, 0x09, 0x10, 0x20,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x01, 0x01, 0x01, 0x03, 0x03, 0x03, 0x05, 0x09,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x03, 0x03, 0x03, 0x03, 0x05, 0x05, 0x09, 0x11,
    0x02, 0x03, 0x03, 0x02, 0x03, 0x03, 0x02, 0x06,
    0x03, 0x03, 0x03, 0x03, 0x02, 0x03, 0x06, 0x0a,
    0x04, 0x05, 0x05, 0x06, 0x05, 0x05, 0x06, 0x04,
    0x08, 0x09, 0x09, 0x0a, 0x10, 0x11, 0x20, 0x40,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x01, 0x01, 0x01, 0x03, 0x03, 0x03, 0x05, 0x09,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x03, 0x03, 0x03, 0x03, 0x05, 0x05, 0x09, 0x11,
    0x01, 0x01, 0x01, 0x03, 0x01, 0x01, 0x03, 0x05,
    0x01, 0x01, 0x01, 0x03, 0x03, 0x03, 0x05, 0x09,
    0x03, 0x03, 0x03, 0x03, 0x03, 0x03, 0x03, 0x07,
    0x05, 0x05, 0x05, 0x07, 0x09, 0x09, 0x11, 0x21,
    0x02, 0x03, 0x03, 0x02, 0x03, 0x03, 0x02, 0x06,
    0x03, 0x03, 0x03, 0x03, 0x02, 0x03, 0x06, 0x0a,
    0x03, 0x03, 0x03, 0x03, 0x03, 0x03, 0x03, 0x07,
    0x02, 0x03, 0x03, 0x02, 0x06, 0x07, 0x0a, 0x12,
    0x04, 0x05, 0x05, 0x06, 0x05, 0x05, 0x06, 0x04,
    0x05, 0x05, 0x05, 0x07, 0x06, 0x07, 0x04, 0x0c,
    0x08, 0x09, 0x09, 0x0a, 0x09, 0x09, 0x0a, 0x0c,
    0x10, 0x11, 0x11, 0x12, 0x20, 0x21, 0x40, 0x80,
];

/// The run table matching a fragment size.
pub fn fragtbl(frag: i32) -> &'static [u8; 256] {
    match frag {
        8 => &FRAGTBL8,
        1 | 2 | 4 => &FRAGTBL124,
        _ => panic!("fragtbl: unsupported fragment count {frag}"),
    }
}

/// Window masks for run matching, indexed by run size. `AROUND[s]` spans a
/// candidate run of s plus the bit on either side; a window matches
/// `INSIDE[s]` exactly when the s bits are free and both neighbors are not.
/// Maps are shifted left once before matching so the block edges read as
/// allocated neighbors.
const AROUND: [u32; MAXFRAG + 1] = [
    0x3, 0x7, 0xf, 0x1f, 0x3f, 0x7f, 0xff, 0x1ff, 0x3ff,
];
const INSIDE: [u32; MAXFRAG + 1] = [
    0x0, 0x2, 0x6, 0xe, 0x1e, 0x3e, 0x7e, 0xfe, 0x1fe,
];

/// One block's worth of free bits from a fragment map, as a little-endian
/// field of `frag` bits.
pub fn blkmap(frag: i32, map: &[u8], loc: i64) -> u32 {
    ((map[(loc / 8) as usize] >> (loc % 8)) & (0xff >> (8 - frag))) as u32
}

/// Tally the maximal free runs of `fragmap` (one block of `frag` bits) into
/// `frsum` by run length, weighted by `cnt`; a fully free block counts into
/// `nbfree` instead.
pub fn fragacct(frag: i32, fragmap: u32, frsum: &mut [i32; MAXFRAG], nbfree: &mut i32, cnt: i32) {
    let full = 0xffu32 >> (8 - frag);
    debug_assert!(fragmap <= full, "fragment map wider than a block");
    if fragmap == full {
        *nbfree += cnt;
    }
    let inblk = (fragtbl(frag)[fragmap as usize] as u32) << 1;
    let map = fragmap << 1;
    for siz in 1..frag {
        if inblk & (1 << (siz + (frag % 8))) == 0 {
            continue;
        }
        let mut field = AROUND[siz as usize];
        let mut subfield = INSIDE[siz as usize];
        let mut pos = siz;
        while pos <= frag {
            if map & field == subfield {
                frsum[siz as usize] += cnt;
                pos += siz;
                field <<= siz;
                subfield <<= siz;
            }
            field <<= 1;
            subfield <<= 1;
            pos += 1;
        }
    }
}

/// Find a maximal run of exactly `allocsiz` free fragments in the group's
/// map, scanning bytewise from the preference (or the fragment rotor) and
/// wrapping once. Returns the group-relative fragment address and leaves
/// the rotor at the byte that satisfied the search.
///
/// Panics if the summary promised a run the map does not hold; the two are
/// maintained in lockstep and disagreement means corruption.
pub fn mapsearch(sb: &Superblock, cg: &mut CylGroup, bpref: i64, allocsiz: i32) -> i64 {
    let frag = sb.frag;
    let table = fragtbl(frag);
    let mask = 1u8 << (allocsiz - 1 + (frag % 8));
    let maplen = (sb.fpg as usize).div_ceil(8);
    let start = if bpref != 0 {
        (sb.dtogd(bpref) / 8) as usize
    } else {
        (cg.frotor / 8) as usize
    };
    let hit = |from: usize, len: usize| -> Option<usize> {
        cg.blksfree[from..from + len]
            .iter()
            .position(|&b| table[b as usize] & mask != 0)
            .map(|k| from + k)
    };
    let byte = hit(start, maplen - start)
        .or_else(|| hit(0, start + 1))
        .unwrap_or_else(|| panic!("group {}: fragment map corrupted", cg.cgx));
    let first = (byte * 8) as i64;
    cg.frotor = first as i32;
    let mut bno = first;
    while bno < first + 8 {
        let blk = blkmap(frag, &cg.blksfree, bno) << 1;
        let mut field = AROUND[allocsiz as usize];
        let mut subfield = INSIDE[allocsiz as usize];
        for pos in 0..=(frag - allocsiz) as i64 {
            if blk & field == subfield {
                return bno + pos;
            }
            field <<= 1;
            subfield <<= 1;
        }
        bno += frag as i64;
    }
    panic!("group {}: block not in map near fragment {first}", cg.cgx);
}

/// The group probe sequence for an allocation that overflowed its preferred
/// group: the preferred group itself, then groups at quadratically growing
/// offsets, then every group from 2 up as a last resort.
pub fn overflow_probes(ncg: u32, start: u32) -> Vec<u32> {
    assert!(start < ncg, "probe start beyond group count");
    let mut seq = vec![start];
    let mut step = 1u64;
    while step < ncg as u64 {
        seq.push(((start as u64 + step) % ncg as u64) as u32);
        step *= 2;
    }
    seq.extend(2..ncg);
    seq
}

/// Take a whole block in this group: the preferred block when it is free,
/// otherwise the next run found from the preference (or the block rotor).
/// Returns the filesystem-wide fragment address.
fn alloccgblk_in(sb: &mut Superblock, csums: &mut [Csum], cg: &mut CylGroup, bpref: i64) -> i64 {
    let frag = sb.frag;
    let mut bno = -1i64;
    let mut pref = cg.rotor as i64;
    if bpref != 0 && sb.dtog(bpref) == cg.cgx as u32 {
        let p = sb.dtogd(sb.blknum(bpref));
        if isblock(frag, &cg.blksfree, p / frag as i64) {
            bno = p;
        } else {
            // No rotational layout to consult: search onward from the busy
            // preference so the pick stays close to it.
            pref = p;
        }
    }
    if bno < 0 {
        bno = mapsearch(sb, cg, pref, frag);
        cg.rotor = bno as i32;
    }
    clrblock(frag, &mut cg.blksfree, bno / frag as i64);
    cg.cs.nbfree -= 1;
    sb.cstotal.nbfree -= 1;
    csums[cg.cgx as usize].nbfree -= 1;
    sb.fmod = 1;
    sb.cgbase(cg.cgx as u32) + bno
}

impl Fs {
    /// Run `allocate` over groups in overflow order until one delivers.
    /// Only the first probe sees the caller's preferred address; rehashed
    /// groups start from their own rotors.
    pub fn hashalloc<T>(
        &mut self,
        start: u32,
        pref: i64,
        want: i64,
        mut allocate: impl FnMut(&mut Fs, u32, i64, i64) -> Result<Option<T>>,
    ) -> Result<Option<T>> {
        let ncg = self.sb.ncg as u32;
        for (i, c) in overflow_probes(ncg, start).into_iter().enumerate() {
            let p = if i == 0 { pref } else { 0 };
            if let Some(got) = allocate(self, c, p, want)? {
                return Ok(Some(got));
            }
        }
        Ok(None)
    }

    /// Allocate `size` bytes (a whole block or a fragment run) for the open
    /// file `vid`, preferably at `bpref`. Charges the owner's quota and the
    /// inode's block count.
    pub fn alloc(&mut self, vid: usize, bpref: i64, size: i64) -> Result<i64> {
        let bsize = self.sb.bsize as i64;
        assert!(
            size > 0 && size <= bsize && self.sb.fragoff(size as u64) == 0,
            "alloc: bad size {size}"
        );
        let frags = self.sb.numfrags(size as u64);
        let enough = (size != bsize || self.sb.cstotal.nbfree != 0)
            && (self.privileged || self.sb.freespace(self.sb.minfree) > 0);
        if enough {
            self.chkdq(vid, frags, false)?;
            let mut pref = bpref;
            if pref >= self.sb.size as i64 {
                pref = 0;
            }
            let c = if pref == 0 {
                self.sb.ino_to_cg(self.vnodes.get(vid).ino)
            } else {
                self.sb.dtog(pref)
            };
            if let Some(bno) = self.hashalloc(c, pref, size, |fs, g, p, s| fs.alloccg(g, p, s))? {
                let vn = self.vnodes.get_mut(vid);
                vn.din.blocks += frags as u32;
                vn.iflag |= IN_CHANGE | IN_UPDATE;
                return Ok(bno);
            }
            self.chkdq(vid, -frags, true)?;
        }
        self.fserr("file system full");
        Err(FsError::NoSpace)
    }

    /// Grow the fragment run at `bprev` from `osize` to `nsize` bytes,
    /// in place when the neighboring fragments are free, otherwise at a
    /// fresh location (the caller moves the data). The allocation request
    /// is shaped by the space/time optimization preference, which flips
    /// itself when fragmentation crosses the reserve thresholds.
    pub fn realloccg(
        &mut self,
        vid: usize,
        bprev: i64,
        osize: i64,
        nsize: i64,
        bpref: i64,
    ) -> Result<i64> {
        let bsize = self.sb.bsize as i64;
        assert!(
            osize > 0
                && osize < nsize
                && nsize <= bsize
                && self.sb.fragoff(osize as u64) == 0
                && self.sb.fragoff(nsize as u64) == 0,
            "realloccg: bad sizes {osize} -> {nsize}"
        );
        assert!(bprev != 0, "realloccg: no existing fragments");
        if !self.privileged && self.sb.freespace(self.sb.minfree) <= 0 {
            self.fserr("file system full");
            return Err(FsError::NoSpace);
        }
        let delta = self.sb.numfrags((nsize - osize) as u64);
        self.chkdq(vid, delta, false)?;
        let c = self.sb.dtog(bprev);
        if let Some(bno) = self.fragextend(c, bprev, osize, nsize)? {
            let vn = self.vnodes.get_mut(vid);
            vn.din.blocks += delta as u32;
            vn.iflag |= IN_CHANGE | IN_UPDATE;
            return Ok(bno);
        }
        let mut pref = bpref;
        if pref >= self.sb.size as i64 {
            pref = 0;
        }
        let request = match self.sb.optim {
            FS_OPTSPACE => {
                // Exact fit packs best, at the cost of copying again if the
                // file keeps growing. Once fragmentation drops to half the
                // reserve the copying no longer pays for itself.
                if self.sb.minfree >= 5
                    && (self.sb.cstotal.nffree as i64)
                        <= self.sb.dsize as i64 * self.sb.minfree as i64 / 200
                {
                    self.sb.optim = FS_OPTTIME;
                    self.img.trace_note("optimization changed from space to time");
                }
                nsize
            }
            _ => {
                // A full block now lets every later growth extend in place.
                // If the leftover tails push fragmentation within 2% of the
                // reserve, fall back to exact fits.
                if (self.sb.cstotal.nffree as i64)
                    >= self.sb.dsize as i64 * (self.sb.minfree as i64 - 2) / 100
                {
                    self.sb.optim = FS_OPTSPACE;
                    self.img.trace_note("optimization changed from time to space");
                }
                bsize
            }
        };
        match self.hashalloc(c, pref, request, |fs, g, p, s| fs.alloccg(g, p, s))? {
            Some(bno) => {
                self.blkfree(bprev, osize)?;
                if request > nsize {
                    self.blkfree(bno + self.sb.numfrags(nsize as u64), request - nsize)?;
                }
                let vn = self.vnodes.get_mut(vid);
                vn.din.blocks += delta as u32;
                vn.iflag |= IN_CHANGE | IN_UPDATE;
                Ok(bno)
            }
            None => {
                self.chkdq(vid, -delta, true)?;
                self.fserr("file system full");
                Err(FsError::NoSpace)
            }
        }
    }

    /// Allocate in one specific group: a whole block when `size` fills one,
    /// otherwise the smallest sufficient fragment run, splitting a fresh
    /// block when no run fits. `Ok(None)` sends the caller to the next group.
    fn alloccg(&mut self, c: u32, bpref: i64, size: i64) -> Result<Option<i64>> {
        let bsize = self.sb.bsize as i64;
        let frag = self.sb.frag;
        if self.csums[c as usize].nbfree == 0 && size == bsize {
            return Ok(None);
        }
        let now = self.now().0 as i32;
        let (id, mut cg) = self.cg_bread(c)?;
        if cg.cs.nbfree == 0 && size == bsize {
            self.cache.brelse(id);
            return Ok(None);
        }
        cg.time = now;
        if size == bsize {
            let bno = alloccgblk_in(&mut self.sb, &mut self.csums, &mut cg, bpref);
            self.cg_bwrite(id, &cg, WriteHow::Delayed)?;
            return Ok(Some(bno));
        }
        let frags = self.sb.numfrags(size as u64) as i32;
        let mut allocsiz = frags;
        while allocsiz < frag && cg.frsum[allocsiz as usize] == 0 {
            allocsiz += 1;
        }
        if allocsiz == frag {
            // No existing run fits; split a whole block and free the tail.
            if cg.cs.nbfree == 0 {
                self.cache.brelse(id);
                return Ok(None);
            }
            let bno = alloccgblk_in(&mut self.sb, &mut self.csums, &mut cg, bpref);
            let d = self.sb.dtogd(bno);
            for i in frags..frag {
                setbit(&mut cg.blksfree, d + i as i64);
            }
            let extra = frag - frags;
            cg.cs.nffree += extra;
            self.sb.cstotal.nffree += extra;
            self.csums[c as usize].nffree += extra;
            self.sb.fmod = 1;
            cg.frsum[extra as usize] += 1;
            self.cg_bwrite(id, &cg, WriteHow::Delayed)?;
            return Ok(Some(bno));
        }
        let bno = mapsearch(&self.sb, &mut cg, bpref, allocsiz);
        for i in 0..frags {
            clrbit(&mut cg.blksfree, bno + i as i64);
        }
        cg.cs.nffree -= frags;
        self.sb.cstotal.nffree -= frags;
        self.csums[c as usize].nffree -= frags;
        self.sb.fmod = 1;
        cg.frsum[allocsiz as usize] -= 1;
        if frags != allocsiz {
            cg.frsum[(allocsiz - frags) as usize] += 1;
        }
        let addr = self.sb.cgbase(c) + bno;
        self.cg_bwrite(id, &cg, WriteHow::Delayed)?;
        Ok(Some(addr))
    }

    /// Extend the fragment run at `bprev` in place if the fragments after
    /// it are free within the same block. `Ok(None)` means the caller must
    /// relocate instead.
    fn fragextend(&mut self, c: u32, bprev: i64, osize: i64, nsize: i64) -> Result<Option<i64>> {
        let frag = self.sb.frag as i64;
        let frags = self.sb.numfrags(nsize as u64);
        let bbase = self.sb.fragnum(bprev);
        if bbase > self.sb.fragnum(bprev + frags - 1) {
            // The extension would cross a block boundary.
            return Ok(None);
        }
        let now = self.now().0 as i32;
        let (id, mut cg) = self.cg_bread(c)?;
        cg.time = now;
        let bno = self.sb.dtogd(bprev);
        let ofrags = self.sb.numfrags(osize as u64);
        for i in ofrags..frags {
            if !isset(&cg.blksfree, bno + i) {
                self.cache.brelse(id);
                return Ok(None);
            }
        }
        // The run being eaten starts where the old fragments end; its
        // summary entry moves down by the piece the extension consumes.
        let mut run_end = frags;
        while run_end < frag - bbase && isset(&cg.blksfree, bno + run_end) {
            run_end += 1;
        }
        cg.frsum[(run_end - ofrags) as usize] -= 1;
        if run_end != frags {
            cg.frsum[(run_end - frags) as usize] += 1;
        }
        for i in ofrags..frags {
            clrbit(&mut cg.blksfree, bno + i);
        }
        let taken = (frags - ofrags) as i32;
        cg.cs.nffree -= taken;
        self.sb.cstotal.nffree -= taken;
        self.csums[c as usize].nffree -= taken;
        self.sb.fmod = 1;
        self.cg_bwrite(id, &cg, WriteHow::Delayed)?;
        Ok(Some(bprev))
    }

    /// Return a block or fragment run to the free maps, merging the freed
    /// fragments with their neighbors and promoting a reassembled block to
    /// the block ledger.
    pub fn blkfree(&mut self, bno: i64, size: i64) -> Result<()> {
        let bsize = self.sb.bsize as i64;
        let frag = self.sb.frag;
        assert!(
            size > 0 && size <= bsize && self.sb.fragoff(size as u64) == 0,
            "blkfree: bad size {size}"
        );
        assert!(
            bno >= 0 && bno < self.sb.size as i64,
            "blkfree: fragment {bno} out of range"
        );
        let c = self.sb.dtog(bno);
        let now = self.now().0 as i32;
        let (id, mut cg) = self.cg_bread(c)?;
        cg.time = now;
        let d = self.sb.dtogd(bno);
        if size == bsize {
            let h = d / frag as i64;
            assert!(
                !isblock(frag, &cg.blksfree, h),
                "blkfree: freeing free block {bno}"
            );
            setblock(frag, &mut cg.blksfree, h);
            cg.cs.nbfree += 1;
            self.sb.cstotal.nbfree += 1;
            self.csums[c as usize].nbfree += 1;
        } else {
            let bbase = d - self.sb.fragnum(d);
            // Retire the summary entries for the runs around the hole, then
            // re-add what the map shows once the fragments are back.
            let before = blkmap(frag, &cg.blksfree, bbase);
            let mut unused = 0;
            fragacct(frag, before, &mut cg.frsum, &mut unused, -1);
            let frags = self.sb.numfrags(size as u64) as i32;
            for i in 0..frags as i64 {
                assert!(
                    !isset(&cg.blksfree, d + i),
                    "blkfree: freeing free fragment {}",
                    bno + i
                );
                setbit(&mut cg.blksfree, d + i);
            }
            cg.cs.nffree += frags;
            self.sb.cstotal.nffree += frags;
            self.csums[c as usize].nffree += frags;
            let after = blkmap(frag, &cg.blksfree, bbase);
            let mut whole = 0;
            fragacct(frag, after, &mut cg.frsum, &mut whole, 1);
            if whole > 0 {
                // The freed fragments completed their block.
                cg.cs.nffree -= frag;
                self.sb.cstotal.nffree -= frag;
                self.csums[c as usize].nffree -= frag;
                cg.cs.nbfree += whole;
                self.sb.cstotal.nbfree += whole;
                self.csums[c as usize].nbfree += whole;
            }
        }
        self.sb.fmod = 1;
        self.cg_bwrite(id, &cg, WriteHow::Delayed)
    }

    /// Allocate an inode near the parent directory: directories seed a new
    /// group chosen for low directory count and spare inodes, plain files
    /// start at the first inode of the parent's group.
    pub fn valloc(&mut self, parent_ino: u32, is_dir: bool) -> Result<u32> {
        let ipg = self.sb.ipg as i64;
        if self.sb.cstotal.nifree == 0 {
            self.fserr("out of inodes");
            return Err(FsError::NoSpace);
        }
        let mut ipref = if is_dir {
            self.dirpref()
        } else {
            self.sb.ino_to_cg(parent_ino) as i64 * ipg
        };
        if ipref >= self.sb.ncg as i64 * ipg {
            ipref = 0;
        }
        let c = self.sb.ino_to_cg(ipref as u32);
        let hit = self.hashalloc(c, ipref, is_dir as i64, |fs, g, p, w| {
            fs.nodealloccg(g, p, w != 0)
        })?;
        match hit {
            Some(ino) => {
                // The slot's previous life must not shine through: a zeroed
                // dinode reaches the disk before the inode is used.
                self.write_dinode(ino, &Dinode::default(), WriteHow::Sync)?;
                Ok(ino)
            }
            None => {
                self.fserr("out of inodes");
                Err(FsError::NoSpace)
            }
        }
    }

    /// Allocate one inode in this group, honoring a preferred slot when it
    /// is free, otherwise scanning bytewise from the inode rotor.
    fn nodealloccg(&mut self, c: u32, ipref: i64, is_dir: bool) -> Result<Option<u32>> {
        let ipg = self.sb.ipg as i64;
        if self.csums[c as usize].nifree == 0 {
            return Ok(None);
        }
        let now = self.now().0 as i32;
        let (id, mut cg) = self.cg_bread(c)?;
        if cg.cs.nifree == 0 {
            self.cache.brelse(id);
            return Ok(None);
        }
        cg.time = now;
        let mut ino = -1i64;
        if ipref != 0 && !isset(&cg.inosused, ipref % ipg) {
            ino = ipref % ipg;
        }
        if ino < 0 {
            let maplen = (ipg as usize).div_ceil(8);
            let start = (cg.irotor / 8) as usize;
            let byte = (start..maplen)
                .chain(0..=start)
                .find(|&i| cg.inosused[i] != 0xff)
                .unwrap_or_else(|| panic!("group {c}: inode map corrupted"));
            let m = cg.inosused[byte];
            let bit = (0..8)
                .find(|&b| m & (1 << b) == 0)
                .unwrap_or_else(|| panic!("group {c}: inode not in map"));
            ino = (byte * 8 + bit) as i64;
            cg.irotor = ino as i32;
        }
        setbit(&mut cg.inosused, ino);
        cg.cs.nifree -= 1;
        self.sb.cstotal.nifree -= 1;
        self.csums[c as usize].nifree -= 1;
        self.sb.fmod = 1;
        if is_dir {
            cg.cs.ndir += 1;
            self.sb.cstotal.ndir += 1;
            self.csums[c as usize].ndir += 1;
        }
        self.cg_bwrite(id, &cg, WriteHow::Delayed)?;
        Ok(Some((c as i64 * ipg + ino) as u32))
    }

    /// Return an inode to the free map, pulling the rotor back so low slots
    /// are reused first.
    pub fn freefile(&mut self, ino: u32, was_dir: bool) -> Result<()> {
        assert!(
            (ino as i64) < self.sb.ncg as i64 * self.sb.ipg as i64,
            "freefile: inode {ino} out of range"
        );
        let c = self.sb.ino_to_cg(ino);
        let now = self.now().0 as i32;
        let (id, mut cg) = self.cg_bread(c)?;
        cg.time = now;
        let slot = (ino % self.sb.ipg as u32) as i64;
        assert!(
            isset(&cg.inosused, slot),
            "freefile: freeing free inode {ino}"
        );
        clrbit(&mut cg.inosused, slot);
        if (slot as i32) < cg.irotor {
            cg.irotor = slot as i32;
        }
        cg.cs.nifree += 1;
        self.sb.cstotal.nifree += 1;
        self.csums[c as usize].nifree += 1;
        if was_dir {
            cg.cs.ndir -= 1;
            self.sb.cstotal.ndir -= 1;
            self.csums[c as usize].ndir -= 1;
        }
        self.sb.fmod = 1;
        self.cg_bwrite(id, &cg, WriteHow::Delayed)
    }

    /// The group seeding a new directory: among groups with at least the
    /// average number of free inodes, the one holding the fewest
    /// directories.
    fn dirpref(&self) -> i64 {
        let avgifree = self.sb.cstotal.nifree / self.sb.ncg;
        let mut minndir = self.sb.ipg;
        let mut mincg = 0u32;
        for (c, cs) in self.csums.iter().enumerate() {
            if cs.nifree >= avgifree && cs.ndir < minndir {
                mincg = c as u32;
                minndir = cs.ndir;
            }
        }
        mincg as i64 * self.sb.ipg as i64
    }

    /// The preferred address for logical block `lbn` of an inode, given the
    /// already-allocated block list of the section it belongs to (`indx`
    /// positions filled). Zero means no preference.
    pub fn blkpref(&mut self, ino: u32, lbn: i64, indx: usize, bap: &[i64]) -> i64 {
        let fpg = self.sb.fpg as i64;
        let frag = self.sb.frag as i64;
        let maxbpg = self.sb.maxbpg as usize;
        if indx.is_multiple_of(maxbpg) || bap[indx - 1] == 0 {
            if lbn < NDADDR as i64 {
                return self.sb.ino_to_cg(ino) as i64 * fpg + frag;
            }
            // Starting a new section: sweep from the next group for one
            // with an above-average count of free blocks.
            let mut startcg = if indx == 0 || bap[indx - 1] == 0 {
                self.sb.ino_to_cg(ino) as i64 + lbn / maxbpg as i64
            } else {
                self.sb.dtog(bap[indx - 1]) as i64 + 1
            };
            startcg %= self.sb.ncg as i64;
            let avgbfree = self.sb.cstotal.nbfree / self.sb.ncg;
            for c in (startcg..self.sb.ncg as i64).chain(0..=startcg) {
                if self.csums[c as usize].nbfree >= avgbfree {
                    self.sb.cgrotor = c as i32;
                    return c * fpg + frag;
                }
            }
            return 0;
        }
        // Mid-section: directly after the previous block.
        bap[indx - 1] + frag
    }

    /// Report a filesystem-level resource failure against the mount point.
    pub(crate) fn fserr(&mut self, msg: &str) {
        let mnt = self.sb.fsmnt.iter().position(|&b| b == 0).unwrap_or(0);
        let name = std::str::from_utf8(&self.sb.fsmnt[..mnt]).unwrap_or("");
        let name = if name.is_empty() { "ffs" } else { name };
        eprintln!("{name}: {msg}");
        self.img.trace_note(msg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devimg::{DiskImage, DiskLabel};
    use crate::fs::tests::fresh_fs;
    use crate::fs::MountOpts;
    use crate::layout::ROOTINO;
    use crate::mkfs::{mkfs, MkfsOpts};
    use crate::namespace::NewVnode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use tempfile::TempDir;

    fn custom_fs(mib: u64, tweak: impl FnOnce(&mut MkfsOpts)) -> (Fs, TempDir) {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("disk.img");
        let sectors = mib * 1024 * 1024 / 512;
        let mut img = DiskImage::create(&path, sectors).unwrap();
        img.write_label(&DiskLabel::whole_disk(sectors)).unwrap();
        let mut opts = MkfsOpts {
            time: Some(1_000_000_000),
            ..Default::default()
        };
        tweak(&mut opts);
        mkfs(&mut img, 'a', &opts).unwrap();
        let fs = Fs::mount_with(
            img,
            'a',
            MountOpts {
                clock: Some(Box::new(crate::FakeClock::at(1_000_000_000))),
                ..Default::default()
            },
        )
        .unwrap();
        (fs, dir)
    }

    /// An open file handle on an existing inode, for charging allocations.
    fn stub_vnode(fs: &mut Fs, ino: u32) -> usize {
        let din = fs.read_dinode(ino).unwrap();
        let vid = match fs.vnodes.getnewvnode().unwrap() {
            NewVnode::Fresh(v) => v,
            NewVnode::Recycled(v, _) => v,
        };
        fs.vnodes.install(vid, ino, din);
        vid
    }

    // ---- independent oracles ----

    /// Does `field` (low `width` bits, set = free) hold a maximal run of
    /// exactly `size` free bits?
    fn has_exact_run(field: u8, width: i32, size: i32) -> bool {
        let mut run = 0;
        let mut found = false;
        for b in 0..=width {
            if b < width && field & (1 << b) != 0 {
                run += 1;
            } else {
                if run == size {
                    found = true;
                }
                run = 0;
            }
        }
        found
    }

    /// Recompute one run-table entry from first principles.
    fn oracle_entry(byte: u8, frag: i32) -> u8 {
        let mut v = 0u8;
        for sub in 0..8 / frag {
            let field = (byte >> (sub * frag)) & (0xff >> (8 - frag));
            for size in 1..=frag {
                if has_exact_run(field, frag, size) {
                    v |= 1 << (size - 1 + (frag % 8));
                }
            }
        }
        v
    }

    /// Count maximal free runs of a block field by length; a fully free
    /// field counts separately.
    fn runs(field: u32, width: i32) -> ([i32; MAXFRAG], i32) {
        let mut out = [0i32; MAXFRAG];
        let mut whole = 0;
        let mut run = 0;
        for b in 0..=width {
            if b < width && field & (1 << b) != 0 {
                run += 1;
            } else {
                if run == width {
                    whole += 1;
                } else if run > 0 {
                    out[run as usize] += 1;
                }
                run = 0;
            }
        }
        (out, whole)
    }

    fn exact_run_at(field: u32, frag: i32, pos: i32, size: i32) -> bool {
        for b in pos..pos + size {
            if field & (1 << b) == 0 {
                return false;
            }
        }
        let before = pos > 0 && field & (1 << (pos - 1)) != 0;
        let after = pos + size < frag && field & (1 << (pos + size)) != 0;
        !before && !after
    }

    /// Plain linear restatement of the map search contract: first byte in
    /// wrap order holding an exact run, first position inside that byte.
    fn mapsearch_oracle(frag: i32, map: &[u8], start_byte: usize, allocsiz: i32) -> Option<i64> {
        for byte in (start_byte..map.len()).chain(0..=start_byte) {
            for sub in 0..8 / frag {
                let bno = (byte * 8) as i64 + (sub * frag) as i64;
                let field = blkmap(frag, map, bno);
                for pos in 0..=frag - allocsiz {
                    if exact_run_at(field, frag, pos, allocsiz) {
                        return Some(bno + pos as i64);
                    }
                }
            }
        }
        None
    }

    /// Recount one group's ledgers straight from its bitmaps: whole free
    /// blocks, free fragments, fragment runs by length, free inodes.
    fn recount(sb: &Superblock, cg: &CylGroup) -> (i32, i32, [i32; MAXFRAG], i32) {
        let frag = sb.frag as i64;
        let nd = cg.ndblk as i64;
        let (mut nb, mut nf) = (0, 0);
        let mut frsum = [0i32; MAXFRAG];
        let mut f = 0i64;
        while f < nd {
            if f % frag == 0 && f + frag <= nd && isblock(sb.frag, &cg.blksfree, f / frag) {
                nb += 1;
                f += frag;
            } else if isset(&cg.blksfree, f) {
                let end = (f - f % frag + frag).min(nd);
                let mut e = f;
                while e < end && isset(&cg.blksfree, e) {
                    e += 1;
                }
                frsum[(e - f) as usize] += 1;
                nf += (e - f) as i32;
                f = e;
            } else {
                f += 1;
            }
        }
        let mut ni = 0;
        for i in 0..sb.ipg as i64 {
            if !isset(&cg.inosused, i) {
                ni += 1;
            }
        }
        (nb, nf, frsum, ni)
    }

    /// Assert that every ledger agrees with the bitmaps: group header,
    /// in-core summary copy, and filesystem totals.
    fn audit(fs: &mut Fs) {
        let ncg = fs.superblock().ncg as u32;
        let mut total = Csum::default();
        for c in 0..ncg {
            let (id, cg) = fs.cg_bread(c).unwrap();
            fs.cache.brelse(id);
            let (nb, nf, frsum, ni) = recount(fs.superblock(), &cg);
            assert_eq!(cg.cs.nbfree, nb, "group {c} free blocks");
            assert_eq!(cg.cs.nffree, nf, "group {c} free fragments");
            assert_eq!(cg.frsum, frsum, "group {c} fragment summary");
            assert_eq!(cg.cs.nifree, ni, "group {c} free inodes");
            assert_eq!(fs.csums[c as usize], cg.cs, "group {c} summary copy");
            total.ndir += cg.cs.ndir;
            total.nbfree += cg.cs.nbfree;
            total.nifree += cg.cs.nifree;
            total.nffree += cg.cs.nffree;
        }
        assert_eq!(fs.superblock().cstotal, total, "filesystem totals");
    }

    // ---- run tables ----

    #[test]
    fn fragment_tables_match_the_run_oracle() {
        for m in 0..=255u8 {
            assert_eq!(FRAGTBL8[m as usize], oracle_entry(m, 8), "fragtbl8[{m:#04x}]");
            let want = oracle_entry(m, 1) | oracle_entry(m, 2) | oracle_entry(m, 4);
            assert_eq!(FRAGTBL124[m as usize], want, "fragtbl124[{m:#04x}]");
        }
        assert_eq!(FRAGTBL8[0x07], 0x04);
        assert_eq!(FRAGTBL8[0xff], 0x80);
        assert_eq!(&FRAGTBL8[0..8], &[0x00, 0x01, 0x01, 0x02, 0x01, 0x01, 0x02, 0x04]);
        assert_eq!(&FRAGTBL124[0..8], &[0x00, 0x16, 0x16, 0x2a, 0x16, 0x16, 0x26, 0x4e]);
    }

    #[test]
    fn fragment_accounting_decomposes_runs() {
        let mut frsum = [0i32; MAXFRAG];
        let mut nb = 0;
        fragacct(8, 0b0110_0110, &mut frsum, &mut nb, 1);
        assert_eq!(frsum[2], 2);
        assert_eq!(frsum.iter().sum::<i32>(), 2);
        assert_eq!(nb, 0);
        fragacct(8, 0xff, &mut frsum, &mut nb, 1);
        assert_eq!(nb, 1);
        fragacct(8, 0b0110_0110, &mut frsum, &mut nb, -1);
        assert_eq!(frsum, [0; MAXFRAG]);
    }

    #[test]
    fn fragment_accounting_matches_a_run_count_oracle() {
        for &frag in &[1i32, 2, 4, 8] {
            let full = 0xffu32 >> (8 - frag);
            for field in 0..=full {
                let mut frsum = [0i32; MAXFRAG];
                let mut nb = 0;
                fragacct(frag, field, &mut frsum, &mut nb, 1);
                let (want, whole) = runs(field, frag);
                assert_eq!(frsum, want, "frag {frag} map {field:#04x}");
                assert_eq!(nb, whole, "frag {frag} map {field:#04x}");
                fragacct(frag, field, &mut frsum, &mut nb, -1);
                assert_eq!(frsum, [0; MAXFRAG]);
                assert_eq!(nb, 0);
            }
        }
    }

    // ---- map search ----

    #[test]
    fn map_search_agrees_with_a_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_7073);
        for fsize in [1024, 2048] {
            let (mut fs, _d) = custom_fs(16, |o| o.fsize = fsize);
            let frag = fs.superblock().frag;
            let fpg = fs.superblock().fpg;
            let (id, template) = fs.cg_bread(0).unwrap();
            fs.cache.brelse(id);
            let maplen = (fpg as usize + 7) / 8;
            assert_eq!(template.blksfree.len(), maplen);
            for _ in 0..6000 {
                let mut cg = template.clone();
                rng.fill(&mut cg.blksfree[..]);
                if rng.gen_bool(0.3) {
                    // Sparse map: at most one interesting byte, so the scan
                    // has to travel and wrap.
                    let keep = rng.gen_range(0..maplen);
                    for (i, b) in cg.blksfree.iter_mut().enumerate() {
                        if i != keep {
                            *b = 0;
                        }
                    }
                }
                cg.frotor = rng.gen_range(0..fpg);
                let bpref = if rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(1..fpg as i64)
                };
                let allocsiz = rng.gen_range(1..=frag);
                let start_byte = if bpref != 0 {
                    (bpref / 8) as usize
                } else {
                    (cg.frotor / 8) as usize
                };
                let expect = match mapsearch_oracle(frag, &cg.blksfree, start_byte, allocsiz) {
                    Some(e) => e,
                    None => {
                        // Nothing to find; plant one run so the trial keeps
                        // exercising the success path.
                        let byte = rng.gen_range(0..maplen);
                        let sub = rng.gen_range(0..8 / frag);
                        let pos = rng.gen_range(0..=frag - allocsiz);
                        cg.blksfree[byte] =
                            (((1u32 << allocsiz) - 1) << (sub * frag + pos)) as u8;
                        mapsearch_oracle(frag, &cg.blksfree, start_byte, allocsiz).unwrap()
                    }
                };
                let got = mapsearch(fs.superblock(), &mut cg, bpref, allocsiz);
                assert_eq!(got, expect, "frag {frag} allocsiz {allocsiz} bpref {bpref}");
                assert_eq!(cg.frotor as i64, got / 8 * 8, "rotor follows the found byte");
            }
        }
    }

    #[test]
    #[should_panic(expected = "map corrupted")]
    fn a_map_that_breaks_its_summarys_promise_is_a_hard_error() {
        let (mut fs, _d) = fresh_fs(16);
        let (id, mut cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        for b in cg.blksfree.iter_mut() {
            *b = 0;
        }
        mapsearch(fs.superblock(), &mut cg, 0, 3);
    }

    // ---- overflow probing ----

    #[test]
    fn overflow_probe_order_is_pinned() {
        assert_eq!(overflow_probes(8, 5), vec![5, 6, 7, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(overflow_probes(4, 3), vec![3, 0, 1, 2, 3]);
        assert_eq!(overflow_probes(1, 0), vec![0]);
    }

    #[test]
    fn hashalloc_passes_the_preference_only_to_the_first_probe() {
        let (mut fs, _d) = fresh_fs(128);
        assert_eq!(fs.superblock().ncg, 8);
        let mut seen = Vec::new();
        let out: Option<i64> = fs
            .hashalloc(5, 4242, 0, |_, c, p, _| {
                seen.push((c, p));
                Ok(None)
            })
            .unwrap();
        assert!(out.is_none());
        let order: Vec<u32> = seen.iter().map(|&(c, _)| c).collect();
        assert_eq!(order, overflow_probes(8, 5));
        assert_eq!(seen[0].1, 4242);
        assert!(seen[1..].iter().all(|&(_, p)| p == 0));
    }

    #[test]
    fn hashalloc_stops_at_the_first_hit() {
        let (mut fs, _d) = fresh_fs(128);
        let mut calls = 0;
        let out = fs
            .hashalloc(3, 0, 0, |_, c, _, _| {
                calls += 1;
                Ok(if c == 7 { Some(c) } else { None })
            })
            .unwrap();
        assert_eq!(out, Some(7));
        // Probes run 3, 4, 5, 7; the hit ends the search.
        assert_eq!(calls, 4);
    }

    // ---- block and fragment allocation ----

    #[test]
    fn whole_block_allocation_comes_from_the_inode_group() {
        let (mut fs, _d) = fresh_fs(64);
        let v = stub_vnode(&mut fs, ROOTINO);
        let blocks0 = fs.vnodes.get(v).din.blocks;
        let before = fs.csums[0];
        let bno = fs.alloc(v, 0, 8192).unwrap();
        assert_eq!(fs.superblock().dtog(bno), 0);
        assert_eq!(bno % 8, 0);
        assert_eq!(fs.csums[0].nbfree, before.nbfree - 1);
        assert_eq!(fs.vnodes.get(v).din.blocks, blocks0 + 8);
        assert_ne!(fs.vnodes.get(v).iflag & (IN_CHANGE | IN_UPDATE), 0);
        audit(&mut fs);
    }

    #[test]
    fn fragment_request_consumes_the_smallest_sufficient_run() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let blocks0 = fs.vnodes.get(v).din.blocks;
        // A fresh image leaves two 7-fragment runs beside the metadata; a
        // 3-fragment request carves the first into 3 used plus 4 free.
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[7], 2);
        let bno = fs.alloc(v, 0, 3 * 1024).unwrap();
        assert_eq!(bno, 1049);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[7], 1);
        assert_eq!(cg.frsum[4], 1);
        assert_eq!(fs.vnodes.get(v).din.blocks, blocks0 + 3);
        audit(&mut fs);
    }

    #[test]
    fn fragment_request_splits_a_block_when_no_run_fits() {
        let (mut fs, _d) = fresh_fs(64);
        let v = stub_vnode(&mut fs, ROOTINO);
        // Group 1 holds no partial runs, so a fragment request there has to
        // break a whole block and return the tail to the fragment ledger.
        let pref = fs.superblock().cgdmin(1);
        let before = fs.csums[1];
        assert_eq!(before.nffree, 0);
        let bno = fs.alloc(v, pref, 3 * 1024).unwrap();
        assert_eq!(bno, pref);
        assert_eq!(fs.superblock().dtog(bno), 1);
        assert_eq!(fs.csums[1].nbfree, before.nbfree - 1);
        assert_eq!(fs.csums[1].nffree, 5);
        let (id, cg) = fs.cg_bread(1).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[5], 1);
        audit(&mut fs);
    }

    #[test]
    fn extension_in_place_when_the_next_fragments_are_free() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let blocks0 = fs.vnodes.get(v).din.blocks;
        let a = fs.alloc(v, 0, 1024).unwrap();
        assert_eq!(a, 1049);
        let nffree = fs.csums[0].nffree;
        let b = fs.realloccg(v, a, 1024, 2048, 0).unwrap();
        assert_eq!(b, a);
        assert_eq!(fs.csums[0].nffree, nffree - 1);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[6], 0);
        assert_eq!(cg.frsum[5], 1);
        assert_eq!(fs.vnodes.get(v).din.blocks, blocks0 + 2);
        audit(&mut fs);
    }

    #[test]
    fn moving_reallocation_frees_the_old_fragments_and_the_tail() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let blocks0 = fs.vnodes.get(v).din.blocks;
        let a = fs.alloc(v, 0, 1024).unwrap();
        // Occupy the neighbor so the fragment cannot grow in place.
        let b = fs.alloc(v, a + 1, 1024).unwrap();
        assert_eq!(b, a + 1);
        let nbfree = fs.superblock().cstotal.nbfree;
        let nffree = fs.superblock().cstotal.nffree;
        // Time optimization requests a whole block and hands back the tail:
        // one block leaves the ledger, the old fragment and six tail
        // fragments come back.
        assert_eq!(fs.superblock().optim, FS_OPTTIME);
        let c = fs.realloccg(v, a, 1024, 2048, 0).unwrap();
        assert_ne!(c, a);
        assert_eq!(c % 8, 0);
        assert_eq!(fs.superblock().cstotal.nbfree, nbfree - 1);
        assert_eq!(fs.superblock().cstotal.nffree, nffree + 7);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert!(isset(&cg.blksfree, fs.superblock().dtogd(a)));
        assert_eq!(cg.frsum[1], 1);
        assert_eq!(cg.frsum[5], 1);
        assert_eq!(cg.frsum[6], 1);
        assert_eq!(fs.vnodes.get(v).din.blocks, blocks0 + 3);
        audit(&mut fs);
    }

    #[test]
    fn space_optimization_flips_to_time_when_fragmentation_is_low() {
        let (mut fs, _d) = custom_fs(16, |o| o.optim = FS_OPTSPACE);
        let v = stub_vnode(&mut fs, ROOTINO);
        let a = fs.alloc(v, 0, 1024).unwrap();
        let _b = fs.alloc(v, a + 1, 1024).unwrap();
        let nbfree = fs.superblock().cstotal.nbfree;
        let c = fs.realloccg(v, a, 1024, 2048, 0).unwrap();
        // The flip happens on the way in, but this request still gets the
        // exact fit it asked for: no whole block is consumed.
        assert_eq!(fs.superblock().optim, FS_OPTTIME);
        assert_ne!(c, a);
        assert_eq!(fs.superblock().cstotal.nbfree, nbfree);
        audit(&mut fs);
    }

    #[test]
    fn freeing_fragments_coalesces_whole_blocks() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let b = fs.alloc(v, 0, 8192).unwrap();
        let nbfree = fs.superblock().cstotal.nbfree;
        let nffree = fs.superblock().cstotal.nffree;
        fs.blkfree(b, 3 * 1024).unwrap();
        assert_eq!(fs.superblock().cstotal.nffree, nffree + 3);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[3], 1);
        audit(&mut fs);
        fs.blkfree(b + 3, 5 * 1024).unwrap();
        // The two pieces reassembled the block.
        assert_eq!(fs.superblock().cstotal.nffree, nffree);
        assert_eq!(fs.superblock().cstotal.nbfree, nbfree + 1);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert_eq!(cg.frsum[3], 0);
        audit(&mut fs);
    }

    #[test]
    #[should_panic(expected = "freeing free fragment")]
    fn double_freeing_fragments_is_a_hard_error() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let b = fs.alloc(v, 0, 2048).unwrap();
        fs.blkfree(b, 2048).unwrap();
        let _ = fs.blkfree(b, 2048);
    }

    #[test]
    #[should_panic(expected = "freeing free block")]
    fn double_freeing_a_block_is_a_hard_error() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let b = fs.alloc(v, 0, 8192).unwrap();
        fs.blkfree(b, 8192).unwrap();
        let _ = fs.blkfree(b, 8192);
    }

    // ---- inodes ----

    #[test]
    fn inode_allocation_prefers_the_parent_group_and_scans_forward() {
        let (mut fs, _d) = fresh_fs(64);
        let nifree = fs.superblock().cstotal.nifree;
        let i1 = fs.valloc(ROOTINO, false).unwrap();
        assert_eq!(i1, 3);
        let i2 = fs.valloc(ROOTINO, false).unwrap();
        assert_eq!(i2, 4);
        assert_eq!(fs.superblock().cstotal.nifree, nifree - 2);
        fs.freefile(i1, false).unwrap();
        // The rotor follows the lowest freed slot.
        let i3 = fs.valloc(ROOTINO, false).unwrap();
        assert_eq!(i3, 3);
        audit(&mut fs);
    }

    #[test]
    #[should_panic(expected = "freeing free inode")]
    fn double_freeing_an_inode_is_a_hard_error() {
        let (mut fs, _d) = fresh_fs(16);
        let ino = fs.valloc(ROOTINO, false).unwrap();
        fs.freefile(ino, false).unwrap();
        let _ = fs.freefile(ino, false);
    }

    #[test]
    fn directories_seed_the_emptiest_group() {
        let (mut fs, _d) = fresh_fs(64);
        // Group 0 already holds the root directory and the reserved inodes,
        // so a new directory lands at the first inode of group 1.
        let d = fs.valloc(ROOTINO, true).unwrap();
        assert_eq!(d, fs.superblock().ipg as u32);
        assert_eq!(fs.superblock().ino_to_cg(d), 1);
        assert_eq!(fs.csums[1].ndir, 1);
        assert_eq!(fs.superblock().cstotal.ndir, 2);
        audit(&mut fs);
        fs.freefile(d, true).unwrap();
        assert_eq!(fs.superblock().cstotal.ndir, 1);
        audit(&mut fs);
    }

    // ---- placement policy ----

    #[test]
    fn block_preferences_follow_the_layout_policy() {
        let (mut fs, _d) = fresh_fs(64);
        let fpg = fs.superblock().fpg as i64;
        let ipg = fs.superblock().ipg as u32;
        // Direct blocks: the inode's own group.
        assert_eq!(fs.blkpref(ROOTINO, 0, 0, &[]), 8);
        assert_eq!(fs.blkpref(2 * ipg + 5, 3, 3, &[10, 20, 0]), 2 * fpg + 8);
        // Mid-section: straight after the previous block.
        assert_eq!(fs.blkpref(ROOTINO, 3, 3, &[100, 200, 500]), 508);
    }

    #[test]
    fn a_new_section_prefers_a_group_with_above_average_free_blocks() {
        let (mut fs, _d) = fresh_fs(32);
        assert_eq!(fs.superblock().ncg, 2);
        let v = stub_vnode(&mut fs, ROOTINO);
        for _ in 0..40 {
            fs.alloc(v, 0, 8192).unwrap();
        }
        // Count free blocks per group straight off the maps.
        let frag = fs.superblock().frag;
        let mut free = [0i64; 2];
        for c in 0..2u32 {
            let (id, cg) = fs.cg_bread(c).unwrap();
            fs.cache.brelse(id);
            free[c as usize] = (0..cg.ndblk as i64 / frag as i64)
                .filter(|&h| isblock(frag, &cg.blksfree, h))
                .count() as i64;
        }
        let avg = (free[0] + free[1]) / 2;
        assert!(free[0] < avg && free[1] >= avg);
        // A logical block past the first section boundary steers the new
        // section into the group that still has room.
        let fpg = fs.superblock().fpg as i64;
        let maxbpg = fs.superblock().maxbpg as i64;
        let p = fs.blkpref(ROOTINO, maxbpg, 0, &[]);
        assert_eq!(p, fpg + 8);
        assert_eq!(fs.superblock().dtog(p), 1);
        assert_eq!(fs.superblock().cgrotor, 1);
    }

    // ---- whole-system behavior ----

    #[test]
    fn allocation_honors_the_free_space_reserve() {
        let (mut fs, _d) = custom_fs(16, |_| {});
        fs.privileged = false;
        let v = stub_vnode(&mut fs, ROOTINO);
        let mut taken = 0;
        let err = loop {
            match fs.alloc(v, 0, 8192) {
                Ok(_) => taken += 1,
                Err(e) => break e,
            }
            assert!(taken < 4000, "reserve never enforced");
        };
        assert!(matches!(err, FsError::NoSpace));
        assert!(taken > 0);
        // The reserve is still on the shelf: only privileged writers may
        // touch it.
        assert!(fs.superblock().freespace(fs.superblock().minfree) <= 0);
        assert!(fs.superblock().cstotal.nbfree > 0);
        audit(&mut fs);
    }

    #[test]
    fn randomized_allocate_and_free_keeps_every_ledger_sound() {
        let (mut fs, _d) = fresh_fs(64);
        let v = stub_vnode(&mut fs, ROOTINO);
        let mut rng = ChaCha8Rng::seed_from_u64(0x4c45_4447);
        let mut live: Vec<(i64, i64)> = Vec::new();
        let mut held: HashSet<i64> = HashSet::new();
        let fs_size = fs.superblock().size as i64;
        for step in 0..400 {
            if live.is_empty() || rng.gen_bool(0.6) {
                let frags = rng.gen_range(1..=8i64);
                let bpref = if rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(0..fs_size)
                };
                match fs.alloc(v, bpref, frags * 1024) {
                    Ok(b) => {
                        for f in b..b + frags {
                            assert!(held.insert(f), "fragment {f} handed out twice");
                        }
                        live.push((b, frags * 1024));
                    }
                    Err(FsError::NoSpace) => {}
                    Err(e) => panic!("unexpected failure: {e}"),
                }
            } else {
                let k = rng.gen_range(0..live.len());
                let (b, size) = live.swap_remove(k);
                fs.blkfree(b, size).unwrap();
                for f in b..b + size / 1024 {
                    held.remove(&f);
                }
            }
            if step % 80 == 0 {
                audit(&mut fs);
            }
        }
        audit(&mut fs);
    }

    #[test]
    fn allocator_state_survives_a_remount() {
        let (mut fs, _d) = fresh_fs(16);
        let v = stub_vnode(&mut fs, ROOTINO);
        let a = fs.alloc(v, 0, 8192).unwrap();
        let b = fs.alloc(v, 0, 3 * 1024).unwrap();
        assert_ne!(a, b);
        fs.blkfree(a, 8192).unwrap();
        let ino = fs.valloc(ROOTINO, false).unwrap();
        let want = fs.superblock().cstotal;
        fs.vnodes.vrele(v);
        let img = fs.unmount().unwrap();
        let mut fs = Fs::mount(img, 'a').unwrap();
        assert_eq!(fs.superblock().cstotal, want);
        let (id, cg) = fs.cg_bread(0).unwrap();
        fs.cache.brelse(id);
        assert!(isset(&cg.inosused, ino as i64));
        audit(&mut fs);
    }
}
