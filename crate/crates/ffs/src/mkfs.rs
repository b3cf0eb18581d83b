//! Filesystem construction.
//!
//! `mkfs` lays a filesystem onto one labeled partition: superblock,
//! cylinder groups with their free maps, zeroed inode blocks, the summary
//! area, the root directory, and finally the alternate superblock copies.
//! Output is fully determined by the options, so images built with a pinned
//! `time` are reproducible byte for byte.

use crate::devimg::{DiskImage, FS_BSDFFS};
use crate::errors::{FsError, Result};
use crate::layout::{
    clrblock, fresh_dir_chunk, isblock, setbit, setblock, Csum, CylGroup, Dinode, Superblock,
    BBSIZE, DEV_BSIZE, DINODE_SIZE, DIRBLKSIZ, FS_OPTSPACE, FS_OPTTIME, IFDIR, MAXFRAG,
    MAXMNTLEN, MAXSYMLINKLEN, ROOTINO, SBOFF, SBSIZE, SB_STRUCT_SIZE,
};

/// Formatting knobs. The defaults build the classic 8192/1024 layout with a
/// 10% reserve and one inode per 2048 bytes.
#[derive(Debug, Clone)]
pub struct MkfsOpts {
    pub bsize: i32,
    pub fsize: i32,
    pub minfree: i32,
    pub optim: i32,
    /// Bytes of data space per inode.
    pub density: i32,
    /// Cylinders per group.
    pub cpg: i32,
    pub nsect: i32,
    pub ntrak: i32,
    pub rps: i32,
    /// Pinned build time; also seeds the filesystem id.
    pub time: Option<i64>,
}

impl Default for MkfsOpts {
    fn default() -> Self {
        MkfsOpts {
            bsize: 8192,
            fsize: 1024,
            minfree: 10,
            optim: FS_OPTTIME,
            density: 2048,
            cpg: 16,
            nsect: 128,
            ntrak: 16,
            rps: 60,
            time: None,
        }
    }
}

fn hm(a: i64, b: i64) -> i64 {
    (a + b - 1) / b
}

fn rup(a: i64, b: i64) -> i64 {
    hm(a, b) * b
}

/// Build a filesystem on partition `part` of `img`. Returns the superblock
/// as written.
pub fn mkfs(img: &mut DiskImage, part: char, opts: &MkfsOpts) -> Result<Superblock> {
    let label = img.read_label()?;
    let p = label.partition(part)?;
    if p.fstype != FS_BSDFFS {
        return Err(FsError::Invalid("partition is not typed for a filesystem"));
    }
    let (bsize, fsize) = (opts.bsize, opts.fsize);
    if fsize < 512 || fsize.count_ones() != 1 {
        return Err(FsError::Invalid("fragment size must be a power of two, at least 512"));
    }
    if !(4096..=65536).contains(&bsize) || bsize.count_ones() != 1 {
        return Err(FsError::Invalid("block size must be a power of two in 4096..=65536"));
    }
    let frag = bsize / fsize;
    if !(1..=MAXFRAG as i32).contains(&frag) {
        return Err(FsError::Invalid("block holds at most 8 fragments"));
    }
    if opts.optim != FS_OPTTIME && opts.optim != FS_OPTSPACE {
        return Err(FsError::Invalid("unknown optimization preference"));
    }
    if !(0..=99).contains(&opts.minfree) {
        return Err(FsError::Invalid("minfree is a percentage"));
    }
    if opts.cpg < 1 || opts.nsect < 1 || opts.ntrak < 1 {
        return Err(FsError::Invalid("geometry counts must be positive"));
    }

    let time = opts.time.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    });

    let nspf = fsize / DEV_BSIZE as i32;
    let spc = opts.nsect * opts.ntrak;
    // Whole cylinders only; a ragged tail smaller than one cylinder is left
    // off the end.
    let mut ncyl = (p.size as i64 / spc as i64) as i32;
    if ncyl < 1 {
        return Err(FsError::Invalid("partition smaller than one cylinder"));
    }
    let mut size = ncyl as i64 * spc as i64 / nspf as i64;

    let inopb = bsize / DINODE_SIZE as i32;
    let sblkno = (SBOFF / fsize as u64) as i32;
    let cblkno = sblkno + hm(SBSIZE as i64, fsize as i64) as i32;
    let iblkno = cblkno + frag;
    let mut cgmask: i32 = -1;
    let mut i = opts.ntrak;
    while i > 1 {
        cgmask <<= 1;
        i >>= 1;
    }
    if opts.ntrak & (opts.ntrak - 1) != 0 {
        cgmask <<= 1;
    }
    let cgoffset = rup(hm(opts.nsect as i64, nspf as i64), frag as i64) as i32;

    let cpg = opts.cpg;
    let fpg = (cpg as i64 * spc as i64 / nspf as i64) as i32;
    let bytes_per_group = fpg as i64 * fsize as i64;
    let ipg = rup(
        (bytes_per_group / opts.density as i64).max(inopb as i64),
        inopb as i64,
    )
    .min(i16::MAX as i64 * inopb as i64) as i32;
    let dblkno = iblkno + ipg / inopb * frag;
    if dblkno >= fpg {
        return Err(FsError::Invalid("inode density leaves no data space"));
    }
    let mut ncg = hm(ncyl as i64, cpg as i64) as i32;

    let mut sb = Superblock {
        sblkno,
        cblkno,
        iblkno,
        dblkno,
        cgoffset,
        cgmask,
        time: time as i32,
        size: size as i32,
        dsize: 0,
        ncg,
        bsize,
        fsize,
        frag,
        minfree: opts.minfree,
        rotdelay: 0,
        rps: opts.rps,
        bmask: !(bsize - 1),
        fmask: !(fsize - 1),
        bshift: bsize.trailing_zeros() as i32,
        fshift: fsize.trailing_zeros() as i32,
        maxcontig: 1,
        maxbpg: bsize / 4,
        fragshift: frag.trailing_zeros() as i32,
        fsbtodb: nspf.trailing_zeros() as i32,
        sbsize: SBSIZE as i32,
        csmask: !(bsize / 16 - 1),
        csshift: (bsize / 16).trailing_zeros() as i32,
        nindir: bsize / 4,
        inopb,
        nspf,
        optim: opts.optim,
        npsect: opts.nsect,
        interleave: 1,
        trackskew: 0,
        id: [time as i32, 0],
        csaddr: 0,
        cssize: 0,
        cgsize: 0,
        ntrak: opts.ntrak,
        nsect: opts.nsect,
        spc,
        ncyl,
        cpg,
        ipg,
        fpg,
        cstotal: Csum::default(),
        fmod: 0,
        clean: 1,
        ronly: 0,
        flags: 0,
        fsmnt: [0; MAXMNTLEN],
        cgrotor: 0,
        cpc: 0,
        snapinum: [0; 20],
        avgfilesize: 16384,
        avgfpdir: 64,
        pendingblocks: 0,
        pendinginodes: 0,
        contigsumsize: 0,
        maxsymlinklen: MAXSYMLINKLEN as i32,
        inodefmt: 2,
        maxfilesize: 0,
        qbmask: (bsize - 1) as i64,
        qfmask: (fsize - 1) as i64,
        state: 0,
        postblformat: 1,
        nrpos: 1,
        postbloff: 0,
        rotbloff: 0,
    };
    sb.maxfilesize = sb.max_addressable();
    sb.cgsize = sb.fragroundup(sb.cg_struct_size() as u64) as i32;
    if sb.cgsize > bsize {
        return Err(FsError::Invalid("group maps exceed one block; reduce cpg"));
    }
    sb.csaddr = sb.cgdmin(0) as i32;
    sb.cssize = sb.fragroundup(ncg as u64 * 16) as i32;

    // A ragged final group must still fit its own metadata and at least one
    // data block, or it is dropped along with its cylinders.
    loop {
        let last = (ncg - 1) as u32;
        let avail = size - sb.cgbase(last);
        let meta = sb.cgdmin(last) - sb.cgbase(last);
        if c_last_fits(avail, meta, frag) {
            break;
        }
        ncg -= 1;
        if ncg == 0 {
            return Err(FsError::Invalid("partition too small for one group"));
        }
        ncyl = ncg * cpg;
        size = ncyl as i64 * spc as i64 / nspf as i64;
        sb.ncg = ncg;
        sb.ncyl = ncyl;
        sb.size = size as i32;
        sb.cssize = sb.fragroundup(ncg as u64 * 16) as i32;
    }

    let base = p.offset as i64;
    let csfrags = sb.numfrags(sb.cssize as u64);

    // Build and write every group; group 0 stays in memory until the root
    // directory has claimed its inode and first block.
    let mut csums: Vec<Csum> = Vec::with_capacity(ncg as usize);
    let mut cg0: Option<CylGroup> = None;
    let zero_iblock = vec![0u8; bsize as usize];
    for c in 0..ncg as u32 {
        let cbase = sb.cgbase(c);
        let dmax = (cbase + fpg as i64).min(size);
        let dlower = sb.cgsblock(c) - cbase;
        let mut dupper = sb.cgdmin(c) - cbase;
        if c == 0 {
            dupper += csfrags;
        }
        let ncyl_here = if c == ncg as u32 - 1 && ncyl % cpg != 0 {
            (ncyl % cpg) as i16
        } else {
            cpg as i16
        };
        let mut cg = CylGroup::new(&sb, c as i32, ncyl_here, (dmax - cbase) as i32);
        cg.cs.nifree = ipg;
        if c == 0 {
            for ino in 0..ROOTINO as i64 {
                setbit(&mut cg.inosused, ino);
                cg.cs.nifree -= 1;
            }
        }
        if c > 0 {
            // Below the rotated metadata lies ordinary data space.
            let mut d = 0i64;
            while d + (frag as i64) <= dlower {
                setblock(frag, &mut cg.blksfree, d / frag as i64);
                cg.cs.nbfree += 1;
                d += frag as i64;
            }
            if d < dlower {
                let run = (dlower - d) as usize;
                cg.frsum[run] += 1;
                while d < dlower {
                    setbit(&mut cg.blksfree, d);
                    cg.cs.nffree += 1;
                    d += 1;
                }
            }
            sb.dsize += dlower as i32;
        }
        sb.dsize += (dmax - cbase - dupper) as i32;
        let mut d = dupper;
        if d % frag as i64 != 0 {
            let run = (frag as i64 - d % frag as i64).min(dmax - cbase - d) as usize;
            if run > 0 {
                cg.frsum[run] += 1;
                for _ in 0..run {
                    setbit(&mut cg.blksfree, d);
                    cg.cs.nffree += 1;
                    d += 1;
                }
            }
        }
        while d + (frag as i64) <= dmax - cbase {
            setblock(frag, &mut cg.blksfree, d / frag as i64);
            cg.cs.nbfree += 1;
            d += frag as i64;
        }
        if d < dmax - cbase {
            let run = (dmax - cbase - d) as usize;
            cg.frsum[run] += 1;
            while d < dmax - cbase {
                setbit(&mut cg.blksfree, d);
                cg.cs.nffree += 1;
                d += 1;
            }
        }

        // Inode blocks start out holding zeroed inodes.
        for ib in 0..(ipg / inopb) as i64 {
            let addr = sb.cgimin(c) + ib * frag as i64;
            wtfs(img, base, &sb, addr, &zero_iblock)?;
        }

        sb.cstotal.ndir += cg.cs.ndir;
        sb.cstotal.nbfree += cg.cs.nbfree;
        sb.cstotal.nifree += cg.cs.nifree;
        sb.cstotal.nffree += cg.cs.nffree;
        csums.push(cg.cs);
        if c == 0 {
            cg0 = Some(cg);
        } else {
            let bytes = cg.serialize(&sb);
            wtfs(img, base, &sb, sb.cgtod(c), &bytes)?;
        }
    }

    // The root directory: one inode, one fragment of names.
    let mut cg = cg0.take().unwrap();
    let rootblk = root_alloc(&sb, &mut cg, &mut csums[0], DIRBLKSIZ as i64)?;
    setbit(&mut cg.inosused, ROOTINO as i64);
    cg.cs.nifree -= 1;
    cg.cs.ndir += 1;
    csums[0].nifree -= 1;
    csums[0].ndir += 1;
    sb.cstotal.nifree -= 1;
    sb.cstotal.ndir += 1;
    sb.cstotal.nbfree -= 1;
    cg.cs.nbfree -= 1;
    csums[0].nbfree -= 1;
    let leftover = frag as i64 - hm(DIRBLKSIZ as i64, fsize as i64);
    if leftover > 0 {
        cg.cs.nffree += leftover as i32;
        csums[0].nffree += leftover as i32;
        sb.cstotal.nffree += leftover as i32;
    }
    let bytes = cg.serialize(&sb);
    wtfs(img, base, &sb, sb.cgtod(0), &bytes)?;

    let mut root = Dinode {
        mode: IFDIR | 0o755,
        nlink: 2,
        size: DIRBLKSIZ as u64,
        atime: time as i32,
        mtime: time as i32,
        ctime: time as i32,
        blocks: hm(DIRBLKSIZ as i64, fsize as i64) as u32,
        ..Default::default()
    };
    root.db[0] = rootblk as i32;
    let mut iblock = vec![0u8; bsize as usize];
    let slot = sb.ino_to_fsbo(ROOTINO);
    root.serialize_into(&mut iblock[slot * DINODE_SIZE..(slot + 1) * DINODE_SIZE]);
    wtfs(img, base, &sb, sb.ino_to_fsba(ROOTINO), &iblock)?;

    let mut rootdata = vec![0u8; sb.fragroundup(DIRBLKSIZ as u64) as usize];
    rootdata[..DIRBLKSIZ].copy_from_slice(&fresh_dir_chunk(ROOTINO, ROOTINO));
    wtfs(img, base, &sb, rootblk, &rootdata)?;

    // Summary area, primary superblock, then the alternates.
    let mut csbytes = crate::codec::Wr::with_capacity(sb.cssize as usize);
    for cs in &csums {
        cs.serialize(&mut csbytes);
    }
    let mut csbytes = csbytes.done();
    csbytes.resize(sb.cssize as usize, 0);
    wtfs(img, base, &sb, sb.csaddr as i64, &csbytes)?;

    sb.validate()?;
    let mut sbbytes = sb.serialize();
    sbbytes.resize(SBSIZE, 0);
    debug_assert_eq!(SB_STRUCT_SIZE, 1376);
    img.write_sectors(base as u64 + SBOFF / DEV_BSIZE, &sbbytes)?;
    for c in 0..ncg as u32 {
        wtfs(img, base, &sb, sb.cgsblock(c), &sbbytes)?;
    }
    // Boot area past the label sector is cleared; sector 0 keeps the label.
    let bootzeros = vec![0u8; BBSIZE - DEV_BSIZE as usize];
    img.write_sectors(base as u64 + 1, &bootzeros)?;
    Ok(sb)
}

fn c_last_fits(avail: i64, meta: i64, frag: i32) -> bool {
    avail >= meta + frag as i64
}

/// Take the first whole free block of the group and split `len` bytes off
/// its front, freeing the tail fragments. Returns the fragment address.
fn root_alloc(sb: &Superblock, cg: &mut CylGroup, _cs: &mut Csum, len: i64) -> Result<i64> {
    let frag = sb.frag as i64;
    let mut d = 0i64;
    while d + frag <= cg.ndblk as i64 {
        if isblock(sb.frag, &cg.blksfree, d / frag) {
            clrblock(sb.frag, &mut cg.blksfree, d / frag);
            let frags = hm(len, sb.fsize as i64);
            if frags < frag {
                cg.frsum[(frag - frags) as usize] += 1;
                for f in d + frags..d + frag {
                    setbit(&mut cg.blksfree, f);
                }
            }
            return Ok(sb.cgbase(cg.cgx as u32) + d);
        }
        d += frag;
    }
    Err(FsError::NoSpace)
}

fn wtfs(img: &mut DiskImage, base: i64, sb: &Superblock, fragaddr: i64, bytes: &[u8]) -> Result<()> {
    let sector = base + sb.fsbtodb(fragaddr);
    img.write_sectors(sector as u64, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devimg::DiskLabel;
    use crate::layout::isset;
    use tempfile::TempDir;

    fn build(mib: u64, opts: &MkfsOpts) -> (DiskImage, Superblock, TempDir) {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("disk.img");
        let sectors = mib * 1024 * 1024 / DEV_BSIZE;
        let mut img = DiskImage::create(&path, sectors).unwrap();
        img.write_label(&DiskLabel::whole_disk(sectors)).unwrap();
        let sb = mkfs(&mut img, 'a', opts).unwrap();
        (img, sb, dir)
    }

    fn opts_at(time: i64) -> MkfsOpts {
        MkfsOpts {
            time: Some(time),
            ..Default::default()
        }
    }

    #[test]
    fn classic_geometry_for_a_16mib_partition() {
        let (_img, sb, _d) = build(16, &opts_at(5000));
        assert_eq!(sb.ncg, 1);
        assert_eq!(sb.fpg, 16384);
        assert_eq!(sb.ipg, 8192);
        assert_eq!(sb.sblkno, 8);
        assert_eq!(sb.cblkno, 16);
        assert_eq!(sb.iblkno, 24);
        assert_eq!(sb.dblkno, 1048);
        assert_eq!(sb.cgoffset, 64);
        assert_eq!(sb.cgmask, !15);
        assert_eq!(sb.cgsize, 4096);
        assert_eq!(sb.size, 16384);
        sb.validate().unwrap();
    }

    #[test]
    fn summaries_match_a_recount_of_the_maps() {
        let (mut img, sb, _d) = build(64, &opts_at(5000));
        assert_eq!(sb.ncg, 4);
        let mut total = Csum::default();
        for c in 0..sb.ncg as u32 {
            let mut raw = vec![0u8; sb.cgsize as usize];
            img.read_sectors(sb.fsbtodb(sb.cgtod(c)) as u64, &mut raw)
                .unwrap();
            let cg = CylGroup::parse(&sb, &raw).unwrap();
            // Recount blocks and fragments straight from the map.
            let mut nb = 0i32;
            let mut nf = 0i32;
            let mut frsum = [0i32; MAXFRAG];
            let mut run = 0usize;
            for f in 0..cg.ndblk as i64 {
                let free = isset(&cg.blksfree, f);
                let block_start = f % sb.frag as i64 == 0;
                if block_start && run > 0 {
                    frsum[run] += 1;
                    nf += run as i32;
                    run = 0;
                }
                if free {
                    run += 1;
                    if run == sb.frag as usize {
                        nb += 1;
                        run = 0;
                    }
                } else if run > 0 {
                    frsum[run] += 1;
                    nf += run as i32;
                    run = 0;
                }
            }
            if run > 0 {
                frsum[run] += 1;
                nf += run as i32;
            }
            assert_eq!(cg.cs.nbfree, nb, "group {c} block count");
            assert_eq!(cg.cs.nffree, nf, "group {c} fragment count");
            assert_eq!(cg.frsum, frsum, "group {c} run sums");
            let used: i32 = (0..sb.ipg as i64)
                .filter(|&i| isset(&cg.inosused, i))
                .count() as i32;
            assert_eq!(cg.cs.nifree, sb.ipg - used, "group {c} inode count");
            total.ndir += cg.cs.ndir;
            total.nbfree += cg.cs.nbfree;
            total.nifree += cg.cs.nifree;
            total.nffree += cg.cs.nffree;
        }
        assert_eq!(total, sb.cstotal);
        // Exactly the root and the two reserved inodes are in use.
        assert_eq!(
            sb.cstotal.nifree,
            sb.ncg * sb.ipg - 3
        );
        assert_eq!(sb.cstotal.ndir, 1);
    }

    #[test]
    fn root_directory_is_well_formed() {
        let (mut img, sb, _d) = build(16, &opts_at(7777));
        let mut iblock = vec![0u8; sb.bsize as usize];
        img.read_sectors(sb.fsbtodb(sb.ino_to_fsba(ROOTINO)) as u64, &mut iblock)
            .unwrap();
        let slot = sb.ino_to_fsbo(ROOTINO);
        let di = Dinode::parse(&iblock[slot * DINODE_SIZE..]);
        assert_eq!(di.mode, IFDIR | 0o755);
        assert_eq!(di.nlink, 2);
        assert_eq!(di.size, DIRBLKSIZ as u64);
        assert_eq!(di.blocks, 1);
        assert_eq!(di.mtime, 7777);
        let mut data = vec![0u8; sb.fsize as usize];
        img.read_sectors(sb.fsbtodb(di.db[0] as i64) as u64, &mut data)
            .unwrap();
        let dot = crate::layout::Dirent::parse(&data).unwrap();
        assert_eq!((dot.ino, &dot.name[..]), (ROOTINO, &b"."[..]));
        let dotdot = crate::layout::Dirent::parse(&data[dot.reclen as usize..]).unwrap();
        assert_eq!((dotdot.ino, &dotdot.name[..]), (ROOTINO, &b".."[..]));
    }

    #[test]
    fn alternates_mirror_the_primary() {
        let (mut img, sb, _d) = build(64, &opts_at(5000));
        let mut primary = vec![0u8; SBSIZE];
        img.read_sectors(SBOFF / DEV_BSIZE, &mut primary).unwrap();
        for c in 0..sb.ncg as u32 {
            let mut alt = vec![0u8; SBSIZE];
            img.read_sectors(sb.fsbtodb(sb.cgsblock(c)) as u64, &mut alt)
                .unwrap();
            assert_eq!(
                primary[..SB_STRUCT_SIZE],
                alt[..SB_STRUCT_SIZE],
                "alternate in group {c}"
            );
        }
    }

    #[test]
    fn output_is_deterministic() {
        let (mut a, _, _da) = build(16, &opts_at(123));
        let (mut b, _, _db) = build(16, &opts_at(123));
        let mut ba = vec![0u8; 1 << 20];
        let mut bb = vec![0u8; 1 << 20];
        for chunk in 0..16u64 {
            a.read_sectors(chunk * 2048, &mut ba).unwrap();
            b.read_sectors(chunk * 2048, &mut bb).unwrap();
            assert_eq!(ba, bb, "chunk {chunk}");
        }
    }

    #[test]
    fn four_kilobyte_blocks_work_too() {
        let opts = MkfsOpts {
            bsize: 4096,
            fsize: 1024,
            time: Some(99),
            ..Default::default()
        };
        let (_img, sb, _d) = build(16, &opts);
        assert_eq!(sb.frag, 4);
        assert_eq!(sb.sblkno, 8);
        assert_eq!(sb.cblkno, 16);
        assert_eq!(sb.iblkno, 20);
        sb.validate().unwrap();
    }
}
