//! The on-disk format: superblock, cylinder groups, inodes, and the size
//! arithmetic that ties them together.
//!
//! Addresses come in three units. Byte offsets address file contents;
//! fragment numbers address the filesystem (every block pointer is a
//! fragment number); sector numbers address the image. A block is `frag`
//! consecutive fragments and is the unit of full-size allocation; files
//! shorter than a block round up to whole fragments instead.
//!
//! Everything is serialized big-endian at fixed offsets. The superblock
//! struct is 1376 bytes with its magic in the last word; the cylinder group
//! header is 168 bytes followed by the inode-used and block-free bitmaps
//! (the rotational-position tables of old dumps are not stored, their offset
//! fields read zero).

use crate::codec::{Rd, Wr};
use crate::errors::{FsError, Result};

/// Sectors are the unit the image speaks.
pub const DEV_BSIZE: u64 = 512;

/// Boot area at the front of a partition, then the superblock.
pub const BBSIZE: usize = 8192;
pub const SBOFF: u64 = 8192;
pub const SBSIZE: usize = 8192;

pub const FS_MAGIC: i32 = 0x011954;
pub const CG_MAGIC: i32 = 0x090255;

/// Serialized sizes of the fixed parts.
pub const SB_STRUCT_SIZE: usize = 1376;
pub const CG_HEADER_SIZE: usize = 168;
pub const DINODE_SIZE: usize = 128;

/// A block never splits into more than 8 fragments.
pub const MAXFRAG: usize = 8;

/// Direct and indirect pointer counts per inode.
pub const NDADDR: usize = 12;
pub const NIADDR: usize = 3;

/// Inode 0 is never used and inode 1 is historically reserved, so the root
/// directory gets inode 2.
pub const ROOTINO: u32 = 2;

/// Symbolic links up to this many bytes live inside the inode itself,
/// occupying the pointer area.
pub const MAXSYMLINKLEN: usize = (NDADDR + NIADDR) * 4;

pub const MAXMNTLEN: usize = 512;

/// Allocation preference policy: pack fragments tightly or favor full
/// blocks that can grow in place.
pub const FS_OPTTIME: i32 = 0;
pub const FS_OPTSPACE: i32 = 1;

/// File format bits of `di_mode`.
pub const IFMT: u16 = 0o170000;
pub const IFIFO: u16 = 0o010000;
pub const IFCHR: u16 = 0o020000;
pub const IFDIR: u16 = 0o040000;
pub const IFBLK: u16 = 0o060000;
pub const IFREG: u16 = 0o100000;
pub const IFLNK: u16 = 0o120000;
pub const IFSOCK: u16 = 0o140000;

pub const ISUID: u16 = 0o4000;
pub const ISGID: u16 = 0o2000;
pub const ISVTX: u16 = 0o1000;

/// `di_flags` bits: the owner-settable third, then the privileged third.
pub const UF_NODUMP: u32 = 0x0000_0001;
pub const UF_IMMUTABLE: u32 = 0x0000_0002;
pub const UF_APPEND: u32 = 0x0000_0004;
pub const UF_OPAQUE: u32 = 0x0000_0008;
pub const SF_ARCHIVED: u32 = 0x0001_0000;
pub const SF_IMMUTABLE: u32 = 0x0002_0000;
pub const SF_APPEND: u32 = 0x0004_0000;

/// Either append bit forbids non-appending writes; either immutable bit
/// forbids everything.
pub const APPEND_MASK: u32 = UF_APPEND | SF_APPEND;
pub const IMMUTABLE_MASK: u32 = UF_IMMUTABLE | SF_IMMUTABLE;

pub(crate) fn howmany(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Directories are arrays of independent 512-byte chunks; an entry never
/// crosses a chunk boundary, so one sector write never tears an entry.
pub const DIRBLKSIZ: usize = 512;
pub const MAXNAMLEN: usize = 255;

pub const DT_UNKNOWN: u8 = 0;
pub const DT_FIFO: u8 = 1;
pub const DT_CHR: u8 = 2;
pub const DT_DIR: u8 = 4;
pub const DT_BLK: u8 = 6;
pub const DT_REG: u8 = 8;
pub const DT_LNK: u8 = 10;
pub const DT_SOCK: u8 = 12;

/// Bytes an entry with an `n`-byte name occupies: the 8-byte header plus
/// the NUL-terminated name rounded to a 4-byte boundary.
pub fn dirsiz(namlen: usize) -> usize {
    8 + (namlen + 1).div_ceil(4) * 4
}

pub fn dtype_for_mode(mode: u16) -> u8 {
    match mode & IFMT {
        IFIFO => DT_FIFO,
        IFCHR => DT_CHR,
        IFDIR => DT_DIR,
        IFBLK => DT_BLK,
        IFREG => DT_REG,
        IFLNK => DT_LNK,
        IFSOCK => DT_SOCK,
        _ => DT_UNKNOWN,
    }
}

/// A directory entry. `reclen` spans the entry and any free space after it
/// up to the next entry or the chunk end; an entry with `ino` 0 is free
/// space entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dirent {
    pub ino: u32,
    pub reclen: u16,
    pub dtype: u8,
    pub name: Vec<u8>,
}

impl Dirent {
    pub fn new(ino: u32, reclen: u16, dtype: u8, name: &[u8]) -> Dirent {
        Dirent {
            ino,
            reclen,
            dtype,
            name: name.to_vec(),
        }
    }

    /// Bytes this entry's header and name need, independent of `reclen`.
    pub fn size(&self) -> usize {
        dirsiz(self.name.len())
    }

    pub fn encode_into(&self, out: &mut [u8]) {
        assert!(self.name.len() <= MAXNAMLEN);
        assert!(self.reclen as usize >= self.size());
        assert!(out.len() >= self.reclen as usize);
        out[..self.reclen as usize].fill(0);
        out[0..4].copy_from_slice(&self.ino.to_be_bytes());
        out[4..6].copy_from_slice(&self.reclen.to_be_bytes());
        out[6] = self.dtype;
        out[7] = self.name.len() as u8;
        out[8..8 + self.name.len()].copy_from_slice(&self.name);
    }

    /// Parse the entry at the head of `b`, which extends to the chunk end.
    pub fn parse(b: &[u8]) -> Result<Dirent> {
        if b.len() < 8 {
            return Err(FsError::Corrupt("dirent: truncated header".into()));
        }
        let ino = u32::from_be_bytes(b[0..4].try_into().unwrap());
        let reclen = u16::from_be_bytes(b[4..6].try_into().unwrap());
        let dtype = b[6];
        let namlen = b[7] as usize;
        if reclen == 0 || reclen as usize > b.len() || reclen % 4 != 0 {
            return Err(FsError::Corrupt(format!("dirent: reclen {reclen}")));
        }
        if ino != 0 && (namlen > MAXNAMLEN || dirsiz(namlen) > reclen as usize) {
            return Err(FsError::Corrupt(format!("dirent: namlen {namlen}")));
        }
        let name = if ino == 0 {
            Vec::new()
        } else {
            b[8..8 + namlen].to_vec()
        };
        Ok(Dirent {
            ino,
            reclen,
            dtype,
            name,
        })
    }
}

/// Build one fresh directory chunk holding "." and ".." for a directory
/// `own` under parent `parent`.
pub fn fresh_dir_chunk(own: u32, parent: u32) -> [u8; DIRBLKSIZ] {
    let mut chunk = [0u8; DIRBLKSIZ];
    let dot = Dirent::new(own, dirsiz(1) as u16, DT_DIR, b".");
    let dotdot = Dirent::new(parent, (DIRBLKSIZ - dirsiz(1)) as u16, DT_DIR, b"..");
    dot.encode_into(&mut chunk[..]);
    dotdot.encode_into(&mut chunk[dirsiz(1)..]);
    chunk
}

// Free maps are bit arrays, least significant bit first within each byte.
// A set bit in `blksfree` means the fragment is free; a set bit in
// `inosused` means the inode is allocated.

pub fn isset(map: &[u8], i: i64) -> bool {
    map[(i / 8) as usize] & (1 << (i % 8)) != 0
}

pub fn setbit(map: &mut [u8], i: i64) {
    map[(i / 8) as usize] |= 1 << (i % 8);
}

pub fn clrbit(map: &mut [u8], i: i64) {
    map[(i / 8) as usize] &= !(1 << (i % 8));
}

/// True when the whole block whose first fragment is `frag * h` is free.
pub fn isblock(frag: i32, map: &[u8], h: i64) -> bool {
    let mask = blk_mask(frag);
    let shifted = block_byte(frag, map, h) & mask;
    shifted == mask
}

pub fn setblock(frag: i32, map: &mut [u8], h: i64) {
    let mask = blk_mask(frag);
    let (byte, shift) = block_pos(frag, h);
    map[byte] |= mask << shift;
}

pub fn clrblock(frag: i32, map: &mut [u8], h: i64) {
    let mask = blk_mask(frag);
    let (byte, shift) = block_pos(frag, h);
    map[byte] &= !(mask << shift);
}

fn blk_mask(frag: i32) -> u8 {
    match frag {
        8 => 0xff,
        4 => 0x0f,
        2 => 0x03,
        1 => 0x01,
        _ => panic!("unsupported fragment count {frag}"),
    }
}

fn block_pos(frag: i32, h: i64) -> (usize, u32) {
    match frag {
        8 => (h as usize, 0),
        4 => ((h >> 1) as usize, ((h & 1) << 2) as u32),
        2 => ((h >> 2) as usize, ((h & 3) << 1) as u32),
        1 => ((h >> 3) as usize, (h & 7) as u32),
        _ => panic!("unsupported fragment count {frag}"),
    }
}

fn block_byte(frag: i32, map: &[u8], h: i64) -> u8 {
    let (byte, shift) = block_pos(frag, h);
    map[byte] >> shift
}

/// Running totals of what a cylinder group (or the whole filesystem) holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Csum {
    pub ndir: i32,
    pub nbfree: i32,
    pub nifree: i32,
    pub nffree: i32,
}

impl Csum {
    pub fn serialize(&self, w: &mut Wr) {
        w.i32(self.ndir);
        w.i32(self.nbfree);
        w.i32(self.nifree);
        w.i32(self.nffree);
    }

    pub fn parse(r: &mut Rd) -> Csum {
        Csum {
            ndir: r.i32(),
            nbfree: r.i32(),
            nifree: r.i32(),
            nffree: r.i32(),
        }
    }
}

/// The superblock. Field names follow the on-disk struct without its `fs_`
/// prefix; all of them are meaningful to at least one tool, and the spare
/// and pointer regions serialize as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Superblock {
    /// Fragment address of the superblock copy inside each cylinder group.
    pub sblkno: i32,
    /// Fragment address of the cylinder group header in each group.
    pub cblkno: i32,
    /// Fragment address of the first inode block in each group.
    pub iblkno: i32,
    /// Fragment address of the first data block in each group.
    pub dblkno: i32,
    /// Spiral offset: each group's metadata starts `cgoffset * (cgx &
    /// !cgmask)` fragments past the group base.
    pub cgoffset: i32,
    pub cgmask: i32,
    /// Last written time, seconds.
    pub time: i32,
    /// Total fragments on the partition.
    pub size: i32,
    /// Fragments available for data.
    pub dsize: i32,
    pub ncg: i32,
    pub bsize: i32,
    pub fsize: i32,
    /// Fragments per block.
    pub frag: i32,
    /// Percentage of data space held back from normal allocation.
    pub minfree: i32,
    pub rotdelay: i32,
    pub rps: i32,
    pub bmask: i32,
    pub fmask: i32,
    pub bshift: i32,
    pub fshift: i32,
    pub maxcontig: i32,
    /// Blocks an inode may take from one group before being steered onward.
    pub maxbpg: i32,
    pub fragshift: i32,
    /// Shift from fragment numbers to sectors.
    pub fsbtodb: i32,
    pub sbsize: i32,
    pub csmask: i32,
    pub csshift: i32,
    /// Pointers per indirect block.
    pub nindir: i32,
    /// Inodes per block.
    pub inopb: i32,
    /// Sectors per fragment.
    pub nspf: i32,
    pub optim: i32,
    pub npsect: i32,
    pub interleave: i32,
    pub trackskew: i32,
    pub id: [i32; 2],
    /// Fragment address of the cylinder summary area, and its byte size.
    pub csaddr: i32,
    pub cssize: i32,
    /// Bytes set aside for one cylinder group header (a fragment multiple).
    pub cgsize: i32,
    pub ntrak: i32,
    pub nsect: i32,
    /// Sectors per cylinder.
    pub spc: i32,
    pub ncyl: i32,
    /// Cylinders per group.
    pub cpg: i32,
    /// Inodes per group (a multiple of `inopb`).
    pub ipg: i32,
    /// Fragments per group.
    pub fpg: i32,
    pub cstotal: Csum,
    /// Set whenever the in-core superblock is dirtier than the disk.
    pub fmod: i8,
    pub clean: i8,
    pub ronly: i8,
    pub flags: i8,
    pub fsmnt: [u8; MAXMNTLEN],
    /// Last group searched by the block-preference sweep.
    pub cgrotor: i32,
    pub cpc: i32,
    pub snapinum: [i32; 20],
    pub avgfilesize: i32,
    pub avgfpdir: i32,
    pub pendingblocks: i32,
    pub pendinginodes: i32,
    pub contigsumsize: i32,
    pub maxsymlinklen: i32,
    pub inodefmt: i32,
    pub maxfilesize: u64,
    pub qbmask: i64,
    pub qfmask: i64,
    pub state: i32,
    pub postblformat: i32,
    pub nrpos: i32,
    pub postbloff: i32,
    pub rotbloff: i32,
}

impl Superblock {
    // Byte-offset arithmetic.

    /// Byte offset within its block.
    pub fn blkoff(&self, off: u64) -> u64 {
        off & self.qbmask as u64
    }

    /// Byte offset within its fragment.
    pub fn fragoff(&self, off: u64) -> u64 {
        off & self.qfmask as u64
    }

    /// First byte of logical block `lbn`.
    pub fn lblktosize(&self, lbn: i64) -> u64 {
        (lbn as u64) << self.bshift
    }

    /// Logical block holding byte `off`.
    pub fn lblkno(&self, off: u64) -> i64 {
        (off >> self.bshift) as i64
    }

    /// Fragments needed to hold `bytes` (exact; callers round first).
    pub fn numfrags(&self, bytes: u64) -> i64 {
        (bytes >> self.fshift) as i64
    }

    pub fn blkroundup(&self, bytes: u64) -> u64 {
        (bytes + self.qbmask as u64) & self.bmask as i64 as u64
    }

    pub fn fragroundup(&self, bytes: u64) -> u64 {
        (bytes + self.qfmask as u64) & self.fmask as i64 as u64
    }

    // Fragment-address arithmetic.

    pub fn fragstoblks(&self, frags: i64) -> i64 {
        frags >> self.fragshift
    }

    pub fn blkstofrags(&self, blks: i64) -> i64 {
        blks << self.fragshift
    }

    /// Position of a fragment within its block.
    pub fn fragnum(&self, fsb: i64) -> i64 {
        fsb & (self.frag as i64 - 1)
    }

    /// First fragment of the block containing `fsb`.
    pub fn blknum(&self, fsb: i64) -> i64 {
        fsb & !(self.frag as i64 - 1)
    }

    pub fn fsbtodb(&self, fsb: i64) -> i64 {
        fsb << self.fsbtodb
    }

    pub fn dbtofsb(&self, db: i64) -> i64 {
        db >> self.fsbtodb
    }

    /// Cylinder group of a fragment address.
    pub fn dtog(&self, d: i64) -> u32 {
        (d / self.fpg as i64) as u32
    }

    /// Fragment offset within its cylinder group.
    pub fn dtogd(&self, d: i64) -> i64 {
        d % self.fpg as i64
    }

    // Cylinder group anatomy.

    pub fn cgbase(&self, c: u32) -> i64 {
        c as i64 * self.fpg as i64
    }

    /// Start of the group's metadata: the base plus the spiral offset.
    pub fn cgstart(&self, c: u32) -> i64 {
        self.cgbase(c) + self.cgoffset as i64 * (c as i64 & !(self.cgmask as i64))
    }

    /// The group's superblock copy.
    pub fn cgsblock(&self, c: u32) -> i64 {
        self.cgstart(c) + self.sblkno as i64
    }

    /// The group's header block.
    pub fn cgtod(&self, c: u32) -> i64 {
        self.cgstart(c) + self.cblkno as i64
    }

    /// The group's first inode block.
    pub fn cgimin(&self, c: u32) -> i64 {
        self.cgstart(c) + self.iblkno as i64
    }

    /// The group's first data fragment.
    pub fn cgdmin(&self, c: u32) -> i64 {
        self.cgstart(c) + self.dblkno as i64
    }

    // Inode addressing.

    pub fn ino_to_cg(&self, ino: u32) -> u32 {
        ino / self.ipg as u32
    }

    /// Fragment address of the block holding `ino`.
    pub fn ino_to_fsba(&self, ino: u32) -> i64 {
        let within = (ino % self.ipg as u32) as i64;
        self.cgimin(self.ino_to_cg(ino)) + self.blkstofrags(within / self.inopb as i64)
    }

    /// Index of `ino` within its inode block.
    pub fn ino_to_fsbo(&self, ino: u32) -> usize {
        (ino % self.inopb as u32) as usize
    }

    /// Bytes held by logical block `lbn` of a file `size` bytes long: a full
    /// block except for the final, fragment-rounded tail.
    pub fn blksize(&self, size: u64, lbn: i64) -> usize {
        if lbn >= NDADDR as i64 || size >= self.lblktosize(lbn + 1) {
            self.bsize as usize
        } else {
            self.fragroundup(self.blkoff(size)) as usize
        }
    }

    /// Fragments still allocatable while honoring a `percent` reserve.
    pub fn freespace(&self, percent: i32) -> i64 {
        self.blkstofrags(self.cstotal.nbfree as i64) + self.cstotal.nffree as i64
            - self.dsize as i64 * percent as i64 / 100
    }

    /// Serialized size of a group header with these `ipg`/`fpg`: the fixed
    /// header plus the two bitmaps.
    pub fn cg_struct_size(&self) -> usize {
        CG_HEADER_SIZE
            + howmany(self.ipg as u64, 8) as usize
            + howmany(self.fpg as u64, 8) as usize
    }

    /// Largest byte offset addressable through the direct and indirect
    /// pointers of one inode.
    pub fn max_addressable(&self) -> u64 {
        let n = self.nindir as u64;
        let blocks = NDADDR as u64 + n + n * n + n * n * n;
        blocks.saturating_mul(self.bsize as u64)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Wr::with_capacity(SB_STRUCT_SIZE);
        w.i32(0); // historic linkage
        w.i32(0);
        w.i32(self.sblkno);
        w.i32(self.cblkno);
        w.i32(self.iblkno);
        w.i32(self.dblkno);
        w.i32(self.cgoffset);
        w.i32(self.cgmask);
        w.i32(self.time);
        w.i32(self.size);
        w.i32(self.dsize);
        w.i32(self.ncg);
        w.i32(self.bsize);
        w.i32(self.fsize);
        w.i32(self.frag);
        w.i32(self.minfree);
        w.i32(self.rotdelay);
        w.i32(self.rps);
        w.i32(self.bmask);
        w.i32(self.fmask);
        w.i32(self.bshift);
        w.i32(self.fshift);
        w.i32(self.maxcontig);
        w.i32(self.maxbpg);
        w.i32(self.fragshift);
        w.i32(self.fsbtodb);
        w.i32(self.sbsize);
        w.i32(self.csmask);
        w.i32(self.csshift);
        w.i32(self.nindir);
        w.i32(self.inopb);
        w.i32(self.nspf);
        debug_assert_eq!(w.pos(), 128);
        w.i32(self.optim);
        w.i32(self.npsect);
        w.i32(self.interleave);
        w.i32(self.trackskew);
        w.i32(self.id[0]);
        w.i32(self.id[1]);
        w.i32(self.csaddr);
        w.i32(self.cssize);
        w.i32(self.cgsize);
        w.i32(self.ntrak);
        w.i32(self.nsect);
        w.i32(self.spc);
        w.i32(self.ncyl);
        w.i32(self.cpg);
        w.i32(self.ipg);
        w.i32(self.fpg);
        debug_assert_eq!(w.pos(), 192);
        self.cstotal.serialize(&mut w);
        w.i8(self.fmod);
        w.i8(self.clean);
        w.i8(self.ronly);
        w.i8(self.flags);
        w.bytes(&self.fsmnt);
        debug_assert_eq!(w.pos(), 724);
        w.i32(self.cgrotor);
        w.zeros(128); // in-core summary pointers
        w.i32(self.cpc);
        debug_assert_eq!(w.pos(), 860);
        w.zeros(256); // retired rotational layout table
        for s in self.snapinum {
            w.i32(s);
        }
        w.i32(self.avgfilesize);
        w.i32(self.avgfpdir);
        w.zeros(26 * 4);
        debug_assert_eq!(w.pos(), 1308);
        w.i32(self.pendingblocks);
        w.i32(self.pendinginodes);
        w.i32(self.contigsumsize);
        w.i32(self.maxsymlinklen);
        w.i32(self.inodefmt);
        w.u64(self.maxfilesize);
        w.i64(self.qbmask);
        w.i64(self.qfmask);
        w.i32(self.state);
        w.i32(self.postblformat);
        w.i32(self.nrpos);
        w.i32(self.postbloff);
        w.i32(self.rotbloff);
        debug_assert_eq!(w.pos(), 1372);
        w.i32(FS_MAGIC);
        debug_assert_eq!(w.pos(), SB_STRUCT_SIZE);
        w.done()
    }

    pub fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < SB_STRUCT_SIZE {
            return Err(FsError::Corrupt("superblock: short buffer".into()));
        }
        let magic = i32::from_be_bytes(b[1372..1376].try_into().unwrap());
        if magic != FS_MAGIC {
            return Err(FsError::BadMagic {
                what: "superblock",
                found: magic as u32,
                want: FS_MAGIC as u32,
            });
        }
        let mut r = Rd::new(b);
        r.skip(8);
        let sb = Superblock {
            sblkno: r.i32(),
            cblkno: r.i32(),
            iblkno: r.i32(),
            dblkno: r.i32(),
            cgoffset: r.i32(),
            cgmask: r.i32(),
            time: r.i32(),
            size: r.i32(),
            dsize: r.i32(),
            ncg: r.i32(),
            bsize: r.i32(),
            fsize: r.i32(),
            frag: r.i32(),
            minfree: r.i32(),
            rotdelay: r.i32(),
            rps: r.i32(),
            bmask: r.i32(),
            fmask: r.i32(),
            bshift: r.i32(),
            fshift: r.i32(),
            maxcontig: r.i32(),
            maxbpg: r.i32(),
            fragshift: r.i32(),
            fsbtodb: r.i32(),
            sbsize: r.i32(),
            csmask: r.i32(),
            csshift: r.i32(),
            nindir: r.i32(),
            inopb: r.i32(),
            nspf: r.i32(),
            optim: r.i32(),
            npsect: r.i32(),
            interleave: r.i32(),
            trackskew: r.i32(),
            id: [r.i32(), r.i32()],
            csaddr: r.i32(),
            cssize: r.i32(),
            cgsize: r.i32(),
            ntrak: r.i32(),
            nsect: r.i32(),
            spc: r.i32(),
            ncyl: r.i32(),
            cpg: r.i32(),
            ipg: r.i32(),
            fpg: r.i32(),
            cstotal: Csum::parse(&mut r),
            fmod: r.i8(),
            clean: r.i8(),
            ronly: r.i8(),
            flags: r.i8(),
            fsmnt: r.bytes(MAXMNTLEN).try_into().unwrap(),
            cgrotor: r.i32(),
            cpc: {
                r.skip(128);
                r.i32()
            },
            snapinum: {
                r.skip(256);
                let mut s = [0i32; 20];
                for v in &mut s {
                    *v = r.i32();
                }
                s
            },
            avgfilesize: r.i32(),
            avgfpdir: r.i32(),
            pendingblocks: {
                r.skip(26 * 4);
                r.i32()
            },
            pendinginodes: r.i32(),
            contigsumsize: r.i32(),
            maxsymlinklen: r.i32(),
            inodefmt: r.i32(),
            maxfilesize: r.u64(),
            qbmask: r.i64(),
            qfmask: r.i64(),
            state: r.i32(),
            postblformat: r.i32(),
            nrpos: r.i32(),
            postbloff: r.i32(),
            rotbloff: r.i32(),
        };
        debug_assert_eq!(r.pos(), 1372);
        Ok(sb)
    }

    /// Structural sanity. Deliberately silent about the free-space summaries;
    /// those are the consistency checker's department, and a mount must be
    /// able to open an image whose counters have drifted.
    pub fn validate(&self) -> Result<()> {
        fn fail(msg: String) -> Result<()> {
            Err(FsError::Corrupt(format!("superblock: {msg}")))
        }
        let (bsize, fsize, frag) = (self.bsize, self.fsize, self.frag);
        if !(512..=65536).contains(&fsize) || fsize.count_ones() != 1 {
            return fail(format!("fsize {fsize}"));
        }
        if bsize <= 0 || bsize.count_ones() != 1 || bsize > 65536 {
            return fail(format!("bsize {bsize}"));
        }
        if ![1, 2, 4, 8].contains(&frag) || bsize != fsize * frag {
            return fail(format!("frag {frag} (bsize {bsize}, fsize {fsize})"));
        }
        if self.bshift != bsize.trailing_zeros() as i32
            || self.fshift != fsize.trailing_zeros() as i32
            || self.fragshift != frag.trailing_zeros() as i32
            || self.bmask != !(bsize - 1)
            || self.fmask != !(fsize - 1)
            || self.qbmask != (bsize - 1) as i64
            || self.qfmask != (fsize - 1) as i64
        {
            return fail("inconsistent shifts and masks".into());
        }
        if self.fsbtodb != (fsize as u32 / DEV_BSIZE as u32).trailing_zeros() as i32
            || self.nspf != fsize / DEV_BSIZE as i32
        {
            return fail("sector conversion disagrees with fsize".into());
        }
        if self.inopb != bsize / DINODE_SIZE as i32 || self.nindir != bsize / 4 {
            return fail("per-block counts disagree with bsize".into());
        }
        if self.ncg < 1 || self.fpg < frag || self.ipg < self.inopb || self.ipg % self.inopb != 0 {
            return fail(format!(
                "geometry: ncg {} fpg {} ipg {}",
                self.ncg, self.fpg, self.ipg
            ));
        }
        if self.size <= 0 || self.size as i64 > self.ncg as i64 * self.fpg as i64 {
            return fail(format!("size {} vs ncg*fpg", self.size));
        }
        if self.dsize <= 0 || self.dsize >= self.size {
            return fail(format!("dsize {} size {}", self.dsize, self.size));
        }
        if self.sbsize < SB_STRUCT_SIZE as i32 || self.sbsize > SBSIZE as i32 {
            return fail(format!("sbsize {}", self.sbsize));
        }
        if self.sblkno as u64 != SBOFF / fsize as u64 {
            return fail(format!("sblkno {}", self.sblkno));
        }
        if !(self.sblkno < self.cblkno
            && self.cblkno < self.iblkno
            && self.iblkno < self.dblkno
            && self.dblkno < self.fpg)
        {
            return fail("metadata offsets out of order".into());
        }
        if self.cgsize < self.cg_struct_size() as i32 || self.cgsize > bsize {
            return fail(format!("cgsize {}", self.cgsize));
        }
        if !(0..=100).contains(&self.minfree) {
            return fail(format!("minfree {}", self.minfree));
        }
        if self.optim != FS_OPTTIME && self.optim != FS_OPTSPACE {
            return fail(format!("optim {}", self.optim));
        }
        let c = &self.cstotal;
        if c.nbfree < 0
            || c.nffree < 0
            || c.nifree < 0
            || c.ndir < 0
            || self.blkstofrags(c.nbfree as i64) + c.nffree as i64 > self.size as i64
            || c.nifree as i64 > self.ncg as i64 * self.ipg as i64
        {
            return fail("summary counters out of range".into());
        }
        Ok(())
    }
}

/// One cylinder group header plus its bitmaps. `inosused` covers `ipg`
/// inodes, `blksfree` covers `fpg` fragments (set bit = free fragment).
#[derive(Debug, Clone, PartialEq)]
pub struct CylGroup {
    pub time: i32,
    pub cgx: i32,
    pub ncyl: i16,
    /// Inode blocks in this group.
    pub niblk: i16,
    /// Fragments spanned by this group (may fall short of `fpg` in the last
    /// group).
    pub ndblk: i32,
    pub cs: Csum,
    /// Last allocated block, fragment, and inode positions.
    pub rotor: i32,
    pub frotor: i32,
    pub irotor: i32,
    /// Count of free fragment runs by exact length (index 1..frag-1 used).
    pub frsum: [i32; MAXFRAG],
    pub inosused: Vec<u8>,
    pub blksfree: Vec<u8>,
}

impl CylGroup {
    pub fn new(sb: &Superblock, cgx: i32, ncyl: i16, ndblk: i32) -> CylGroup {
        CylGroup {
            time: sb.time,
            cgx,
            ncyl,
            niblk: (sb.ipg / sb.inopb) as i16,
            ndblk,
            cs: Csum::default(),
            rotor: 0,
            frotor: 0,
            irotor: 0,
            frsum: [0; MAXFRAG],
            inosused: vec![0; howmany(sb.ipg as u64, 8) as usize],
            blksfree: vec![0; howmany(sb.fpg as u64, 8) as usize],
        }
    }

    /// Serialize into a buffer of `sb.cgsize` bytes.
    pub fn serialize(&self, sb: &Superblock) -> Vec<u8> {
        let iusedoff = CG_HEADER_SIZE;
        let freeoff = iusedoff + self.inosused.len();
        let nextfreeoff = freeoff + self.blksfree.len();
        let mut w = Wr::with_capacity(sb.cgsize as usize);
        w.i32(0); // historic linkage
        w.i32(CG_MAGIC);
        w.i32(self.time);
        w.i32(self.cgx);
        w.i16(self.ncyl);
        w.i16(self.niblk);
        w.i32(self.ndblk);
        debug_assert_eq!(w.pos(), 24);
        self.cs.serialize(&mut w);
        w.i32(self.rotor);
        w.i32(self.frotor);
        w.i32(self.irotor);
        debug_assert_eq!(w.pos(), 52);
        for f in self.frsum {
            w.i32(f);
        }
        w.i32(0); // rotational block totals: not stored
        w.i32(0); // rotational positions: not stored
        w.i32(iusedoff as i32);
        w.i32(freeoff as i32);
        w.i32(nextfreeoff as i32);
        w.i32(0); // cluster summary: not stored
        w.i32(0); // cluster map: not stored
        w.i32(0); // cluster count
        w.zeros(13 * 4);
        debug_assert_eq!(w.pos(), CG_HEADER_SIZE);
        w.bytes(&self.inosused);
        w.bytes(&self.blksfree);
        let mut buf = w.done();
        buf.resize(sb.cgsize as usize, 0);
        buf
    }

    pub fn parse(sb: &Superblock, b: &[u8]) -> Result<CylGroup> {
        if b.len() < sb.cg_struct_size() {
            return Err(FsError::Corrupt("cg: short buffer".into()));
        }
        let mut r = Rd::new(b);
        r.skip(4);
        let magic = r.i32();
        if magic != CG_MAGIC {
            return Err(FsError::BadMagic {
                what: "cylinder group",
                found: magic as u32,
                want: CG_MAGIC as u32,
            });
        }
        let time = r.i32();
        let cgx = r.i32();
        let ncyl = r.i16();
        let niblk = r.i16();
        let ndblk = r.i32();
        let cs = Csum::parse(&mut r);
        let rotor = r.i32();
        let frotor = r.i32();
        let irotor = r.i32();
        let mut frsum = [0i32; MAXFRAG];
        for f in &mut frsum {
            *f = r.i32();
        }
        r.skip(8);
        let iusedoff = r.i32() as usize;
        let freeoff = r.i32() as usize;
        let nextfreeoff = r.i32() as usize;
        let ilen = howmany(sb.ipg as u64, 8) as usize;
        let flen = howmany(sb.fpg as u64, 8) as usize;
        if iusedoff + ilen > b.len()
            || freeoff + flen > b.len()
            || freeoff != iusedoff + ilen
            || nextfreeoff != freeoff + flen
        {
            return Err(FsError::Corrupt(format!(
                "cg {cgx}: map offsets {iusedoff}/{freeoff}/{nextfreeoff}"
            )));
        }
        Ok(CylGroup {
            time,
            cgx,
            ncyl,
            niblk,
            ndblk,
            cs,
            rotor,
            frotor,
            irotor,
            frsum,
            inosused: b[iusedoff..iusedoff + ilen].to_vec(),
            blksfree: b[freeoff..freeoff + flen].to_vec(),
        })
    }
}

/// The on-disk inode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dinode {
    pub mode: u16,
    pub nlink: i16,
    pub size: u64,
    pub atime: i32,
    pub atimensec: i32,
    pub mtime: i32,
    pub mtimensec: i32,
    pub ctime: i32,
    pub ctimensec: i32,
    pub db: [i32; NDADDR],
    pub ib: [i32; NIADDR],
    pub flags: u32,
    /// Fragments actually held by the file, indirect blocks included.
    pub blocks: u32,
    pub gen: i32,
    pub uid: u32,
    pub gid: u32,
}

impl Default for Dinode {
    fn default() -> Self {
        Dinode {
            mode: 0,
            nlink: 0,
            size: 0,
            atime: 0,
            atimensec: 0,
            mtime: 0,
            mtimensec: 0,
            ctime: 0,
            ctimensec: 0,
            db: [0; NDADDR],
            ib: [0; NIADDR],
            flags: 0,
            blocks: 0,
            gen: 0,
            uid: 0,
            gid: 0,
        }
    }
}

impl Dinode {
    pub fn is_dir(&self) -> bool {
        self.mode & IFMT == IFDIR
    }

    pub fn is_reg(&self) -> bool {
        self.mode & IFMT == IFREG
    }

    pub fn is_symlink(&self) -> bool {
        self.mode & IFMT == IFLNK
    }

    /// Serialize into `out` (exactly one inode slot).
    pub fn serialize_into(&self, out: &mut [u8]) {
        assert_eq!(out.len(), DINODE_SIZE);
        let mut w = Wr::with_capacity(DINODE_SIZE);
        w.u16(self.mode);
        w.i16(self.nlink);
        w.u32(0); // old uid/gid pair
        w.u64(self.size);
        w.i32(self.atime);
        w.i32(self.atimensec);
        w.i32(self.mtime);
        w.i32(self.mtimensec);
        w.i32(self.ctime);
        w.i32(self.ctimensec);
        debug_assert_eq!(w.pos(), 40);
        for d in self.db {
            w.i32(d);
        }
        for i in self.ib {
            w.i32(i);
        }
        debug_assert_eq!(w.pos(), 100);
        w.u32(self.flags);
        w.u32(self.blocks);
        w.i32(self.gen);
        w.u32(self.uid);
        w.u32(self.gid);
        w.zeros(8);
        debug_assert_eq!(w.pos(), DINODE_SIZE);
        out.copy_from_slice(&w.done());
    }

    pub fn parse(b: &[u8]) -> Dinode {
        assert!(b.len() >= DINODE_SIZE);
        let mut r = Rd::new(b);
        let mode = r.u16();
        let nlink = r.i16();
        r.skip(4);
        let size = r.u64();
        let atime = r.i32();
        let atimensec = r.i32();
        let mtime = r.i32();
        let mtimensec = r.i32();
        let ctime = r.i32();
        let ctimensec = r.i32();
        let mut db = [0i32; NDADDR];
        for d in &mut db {
            *d = r.i32();
        }
        let mut ib = [0i32; NIADDR];
        for i in &mut ib {
            *i = r.i32();
        }
        Dinode {
            mode,
            nlink,
            size,
            atime,
            atimensec,
            mtime,
            mtimensec,
            ctime,
            ctimensec,
            db,
            ib,
            flags: r.u32(),
            blocks: r.u32(),
            gen: r.i32(),
            uid: r.u32(),
            gid: r.u32(),
        }
    }

    /// Symlink targets short enough to fit live in the pointer area.
    pub fn short_link_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAXSYMLINKLEN);
        for d in self.db {
            out.extend_from_slice(&d.to_be_bytes());
        }
        for i in self.ib {
            out.extend_from_slice(&i.to_be_bytes());
        }
        out.truncate(self.size as usize);
        out
    }

    pub fn set_short_link(&mut self, target: &[u8]) {
        assert!(target.len() <= MAXSYMLINKLEN);
        let mut area = [0u8; MAXSYMLINKLEN];
        area[..target.len()].copy_from_slice(target);
        for (i, d) in self.db.iter_mut().enumerate() {
            *d = i32::from_be_bytes(area[i * 4..i * 4 + 4].try_into().unwrap());
        }
        for (i, v) in self.ib.iter_mut().enumerate() {
            let off = (NDADDR + i) * 4;
            *v = i32::from_be_bytes(area[off..off + 4].try_into().unwrap());
        }
        self.size = target.len() as u64;
    }
}
