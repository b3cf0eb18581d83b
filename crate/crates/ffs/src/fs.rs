//! One mounted filesystem: the image, the superblock, the buffer cache,
//! and the in-core cylinder summary.
//!
//! `Fs` is the crate's front door. Modules hang their operations off it in
//! their own `impl` blocks; everything shares state through its fields.
//! Device access always goes through the buffer cache with a [`DevStrategy`]
//! that offsets transfers by the partition base, so the cache itself never
//! learns about partitions.

use crate::bufcache::{BufCache, Owner, Strategy, Transfer};
use crate::clock::{Clock, SystemClock};
use crate::devimg::{DiskImage, FS_BSDFFS};
use crate::errors::{FsError, Result};
use crate::layout::{Csum, CylGroup, Dinode, Superblock, DEV_BSIZE, SBOFF, SBSIZE, SB_STRUCT_SIZE};

/// Translates cache transfers into sector I/O on one partition.
pub(crate) struct DevStrategy<'a> {
    pub img: &'a mut DiskImage,
    pub base: i64,
}

impl Strategy for DevStrategy<'_> {
    fn submit(&mut self, x: Transfer<'_>) -> Result<()> {
        let sector = self.base + x.blkno;
        if sector < 0 {
            return Err(FsError::Invalid("transfer before partition start"));
        }
        if x.read {
            self.img.read_sectors(sector as u64, x.data)
        } else {
            self.img.write_sectors(sector as u64, x.data)
        }
    }
}

/// Grab the partition-relative device strategy for a live `Fs` without
/// borrowing the rest of it.
macro_rules! strat {
    ($fs:expr) => {
        crate::fs::DevStrategy {
            img: &mut $fs.img,
            base: $fs.part_base,
        }
    };
}
pub(crate) use strat;

/// How a metadata write leaves the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WriteHow {
    Sync,
    Async,
    Delayed,
}

pub struct MountOpts {
    /// Pretended machine memory; sets the buffer cache size.
    pub physmem: u64,
    /// Privileged callers bypass the free-space reserve and may set
    /// restricted inode flags.
    pub privileged: bool,
    pub read_only: bool,
    pub clock: Option<Box<dyn Clock>>,
}

impl Default for MountOpts {
    fn default() -> Self {
        MountOpts {
            physmem: 8 << 20,
            privileged: true,
            read_only: false,
            clock: None,
        }
    }
}

pub struct Fs {
    pub(crate) img: DiskImage,
    /// First sector of the mounted partition.
    pub(crate) part_base: i64,
    pub(crate) part_sectors: u64,
    pub(crate) sb: Superblock,
    pub(crate) sbdirty: bool,
    pub(crate) cache: BufCache,
    /// In-core copy of the per-group summaries, kept in lockstep with the
    /// group headers and written back with the superblock.
    pub(crate) csums: Vec<Csum>,
    pub(crate) clock: Box<dyn Clock>,
    pub(crate) privileged: bool,
    pub(crate) read_only: bool,
    pub(crate) vnodes: crate::namespace::VnodeTable,
    pub(crate) namecache: crate::namespace::NameCache,
    pub(crate) quota: crate::quota::QuotaState,
    /// Last inode generation number handed out.
    pub(crate) nextgen: i32,
}

impl Fs {
    pub fn mount(img: DiskImage, part: char) -> Result<Fs> {
        Fs::mount_with(img, part, MountOpts::default())
    }

    pub fn mount_with(mut img: DiskImage, part: char, opts: MountOpts) -> Result<Fs> {
        let label = img.read_label()?;
        let p = label.partition(part)?;
        if p.fstype != FS_BSDFFS {
            return Err(FsError::Invalid("partition does not hold a filesystem"));
        }
        let part_base = p.offset as i64;
        let part_sectors = p.size as u64;

        let mut raw = vec![0u8; SBSIZE];
        img.read_sectors(part_base as u64 + SBOFF / DEV_BSIZE, &mut raw)?;
        let sb = Superblock::parse(&raw[..SB_STRUCT_SIZE])?;
        sb.validate()?;
        if sb.size as u64 * sb.nspf as u64 > part_sectors {
            return Err(FsError::Corrupt(format!(
                "filesystem spans {} sectors but the partition has {}",
                sb.size as i64 * sb.nspf as i64,
                part_sectors
            )));
        }

        // Per-group summaries live in the reserved area after group 0's
        // metadata.
        let mut csraw = vec![0u8; sb.cssize as usize];
        img.read_sectors((part_base + sb.fsbtodb(sb.csaddr as i64)) as u64, &mut csraw)?;
        let mut csums = Vec::with_capacity(sb.ncg as usize);
        let mut rd = crate::codec::Rd::new(&csraw);
        for _ in 0..sb.ncg {
            csums.push(Csum::parse(&mut rd));
        }

        let clock = opts.clock.unwrap_or_else(|| Box::new(SystemClock::new()));
        let mut fs = Fs {
            img,
            part_base,
            part_sectors,
            cache: BufCache::with_physmem(opts.physmem),
            csums,
            sb,
            sbdirty: false,
            clock,
            privileged: opts.privileged,
            read_only: opts.read_only,
            vnodes: crate::namespace::VnodeTable::new(),
            namecache: crate::namespace::NameCache::new(),
            quota: crate::quota::QuotaState::new(),
            nextgen: 0,
        };
        fs.nextgen = fs.clock.wall().0 as i32;
        if !fs.read_only {
            fs.sb.clean = 0;
            fs.sb.fmod = 1;
            fs.sbupdate()?;
        }
        Ok(fs)
    }

    pub fn superblock(&self) -> &Superblock {
        &self.sb
    }

    pub fn image(&mut self) -> &mut DiskImage {
        &mut self.img
    }

    pub fn cache_stats(&self) -> crate::bufcache::CacheStats {
        self.cache.stats()
    }

    pub fn cache(&self) -> &BufCache {
        &self.cache
    }

    pub(crate) fn now(&mut self) -> (i64, i32) {
        self.clock.wall()
    }

    pub(crate) fn ro_check(&self) -> Result<()> {
        if self.read_only {
            Err(FsError::ReadOnly)
        } else {
            Ok(())
        }
    }

    /// Next inode generation number: monotonic, and never behind the clock
    /// so numbers stay unique across mounts.
    pub(crate) fn next_gen(&mut self) -> i32 {
        self.nextgen += 1;
        let wall = self.clock.wall().0 as i32;
        if self.nextgen < wall {
            self.nextgen = wall;
        }
        self.nextgen
    }

    /// Read one dinode straight off its inode block.
    pub(crate) fn read_dinode(&mut self, ino: u32) -> Result<crate::layout::Dinode> {
        assert!(
            (ino as i64) < self.sb.ncg as i64 * self.sb.ipg as i64,
            "read_dinode: inode {ino} out of range"
        );
        let sector = self.sb.fsbtodb(self.sb.ino_to_fsba(ino));
        let bsize = self.sb.bsize as usize;
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, bsize, &mut strat)?;
        let off = self.sb.ino_to_fsbo(ino) * crate::layout::DINODE_SIZE;
        let din = crate::layout::Dinode::parse(
            &self.cache.data(id)[off..off + crate::layout::DINODE_SIZE],
        );
        self.cache.brelse(id);
        Ok(din)
    }

    /// Read cylinder group `c` through the cache.
    pub(crate) fn cg_bread(&mut self, c: u32) -> Result<(usize, CylGroup)> {
        let sector = self.sb.fsbtodb(self.sb.cgtod(c));
        let size = self.sb.cgsize as usize;
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, size, &mut strat)?;
        match CylGroup::parse(&self.sb, self.cache.data(id)) {
            Ok(cg) => {
                if cg.cgx != c as i32 {
                    self.cache.brelse(id);
                    return Err(FsError::Corrupt(format!(
                        "group {c} header names group {}",
                        cg.cgx
                    )));
                }
                Ok((id, cg))
            }
            Err(e) => {
                self.cache.brelse(id);
                Err(e)
            }
        }
    }

    /// Write a mutated group header back through its buffer.
    pub(crate) fn cg_bwrite(&mut self, id: usize, cg: &CylGroup, how: WriteHow) -> Result<()> {
        let bytes = cg.serialize(&self.sb);
        self.cache.data_mut(id).copy_from_slice(&bytes);
        let mut strat = strat!(self);
        match how {
            WriteHow::Sync => self.cache.bwrite(id, &mut strat),
            WriteHow::Async => self.cache.bawrite(id, &mut strat),
            WriteHow::Delayed => {
                self.cache.bdwrite(id);
                Ok(())
            }
        }
    }

    /// Fold pending time stamps into an in-core inode and, when anything
    /// changed, write its dinode back to the inode block.
    pub(crate) fn iupdate(&mut self, vid: usize, how: WriteHow) -> Result<()> {
        let (sec, nsec) = self.clock.wall();
        let (ino, din) = {
            let vn = self.vnodes.get_mut(vid);
            if !vn.fold_times(sec as i32, nsec) {
                return Ok(());
            }
            (vn.ino, vn.din.clone())
        };
        if self.read_only {
            return Ok(());
        }
        self.write_dinode(ino, &din, how)
    }

    /// Write one dinode into its slot of the inode block.
    pub(crate) fn write_dinode(&mut self, ino: u32, din: &Dinode, how: WriteHow) -> Result<()> {
        let sector = self.sb.fsbtodb(self.sb.ino_to_fsba(ino));
        let bsize = self.sb.bsize as usize;
        let mut strat = strat!(self);
        let id = self
            .cache
            .bread(Owner::Dev, sector, sector, bsize, &mut strat)?;
        let off = self.sb.ino_to_fsbo(ino) * crate::layout::DINODE_SIZE;
        din.serialize_into(
            &mut self.cache.data_mut(id)[off..off + crate::layout::DINODE_SIZE],
        );
        let mut strat = strat!(self);
        match how {
            WriteHow::Sync => self.cache.bwrite(id, &mut strat),
            WriteHow::Async => self.cache.bawrite(id, &mut strat),
            WriteHow::Delayed => {
                self.cache.bdwrite(id);
                Ok(())
            }
        }
    }

    /// Push every resident inode's pending changes into the cache.
    pub(crate) fn sync_inodes(&mut self) -> Result<()> {
        for vid in self.vnodes.resident_vids() {
            self.iupdate(vid, WriteHow::Delayed)?;
        }
        Ok(())
    }

    /// Write back and drop every resident vnode ahead of unmount. Active
    /// vnodes at unmount are a caller bug.
    pub(crate) fn unmount_vnodes(&mut self) -> Result<()> {
        assert_eq!(
            self.vnodes.active_count(),
            0,
            "unmount with active vnodes"
        );
        for vid in self.vnodes.resident_vids() {
            self.iupdate(vid, WriteHow::Delayed)?;
            self.vnodes.unhash(vid);
        }
        self.namecache.clear();
        Ok(())
    }

    /// Write the superblock and the summary area to the device, bypassing
    /// the cache. The superblock is the recovery anchor; it never waits in
    /// memory once something forces it out.
    pub fn sbupdate(&mut self) -> Result<()> {
        if !self.read_only {
            self.sb.time = self.clock.wall().0 as i32;
        }
        let mut raw = self.sb.serialize();
        raw.resize(SBSIZE, 0);
        self.img
            .write_sectors(self.part_base as u64 + SBOFF / DEV_BSIZE, &raw)?;
        let mut csraw = crate::codec::Wr::with_capacity(self.sb.cssize as usize);
        for cs in &self.csums {
            cs.serialize(&mut csraw);
        }
        let mut csraw = csraw.done();
        csraw.resize(self.sb.cssize as usize, 0);
        let cssector = self.part_base + self.sb.fsbtodb(self.sb.csaddr as i64);
        self.img.write_sectors(cssector as u64, &csraw)?;
        self.sbdirty = false;
        Ok(())
    }

    /// Flush every delayed write, then the superblock if it changed.
    pub fn sync(&mut self) -> Result<()> {
        self.sync_inodes()?;
        let mut strat = strat!(self);
        self.cache.flush_all(&mut strat)?;
        if self.sb.fmod != 0 || self.sbdirty {
            self.sb.fmod = 0;
            self.sbupdate()?;
        }
        Ok(())
    }

    /// Sync, mark the filesystem clean, and hand the image back.
    pub fn unmount(mut self) -> Result<DiskImage> {
        if !self.read_only {
            self.unmount_vnodes()?;
            self.sync()?;
            self.sb.clean = 1;
            self.sbupdate()?;
        }
        Ok(self.img)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::devimg::DiskLabel;
    use crate::mkfs::{mkfs, MkfsOpts};
    use tempfile::TempDir;

    pub(crate) fn fresh_fs(mib: u64) -> (Fs, TempDir) {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("disk.img");
        let sectors = mib * 1024 * 1024 / DEV_BSIZE;
        let mut img = DiskImage::create(&path, sectors).unwrap();
        img.write_label(&DiskLabel::whole_disk(sectors)).unwrap();
        mkfs(
            &mut img,
            'a',
            &MkfsOpts {
                time: Some(1_000_000_000),
                ..Default::default()
            },
        )
        .unwrap();
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

    #[test]
    fn mount_reads_what_mkfs_wrote() {
        let (fs, _dir) = fresh_fs(16);
        let sb = fs.superblock();
        assert_eq!(sb.bsize, 8192);
        assert_eq!(sb.fsize, 1024);
        assert_eq!(sb.frag, 8);
        assert_eq!(fs.csums.len(), sb.ncg as usize);
        let total: (i32, i32, i32, i32) = fs.csums.iter().fold((0, 0, 0, 0), |a, c| {
            (
                a.0 + c.ndir,
                a.1 + c.nbfree,
                a.2 + c.nifree,
                a.3 + c.nffree,
            )
        });
        assert_eq!(total.0, sb.cstotal.ndir);
        assert_eq!(total.1, sb.cstotal.nbfree);
        assert_eq!(total.2, sb.cstotal.nifree);
        assert_eq!(total.3, sb.cstotal.nffree);
    }

    #[test]
    fn mount_rejects_wrong_partition_type() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("disk.img");
        let sectors = 4 * 1024 * 1024 / DEV_BSIZE;
        let mut img = DiskImage::create(&path, sectors).unwrap();
        img.write_label(&DiskLabel::whole_disk(sectors)).unwrap();
        // 'c' is the raw partition; no filesystem lives there.
        assert!(matches!(
            Fs::mount(img, 'c'),
            Err(FsError::Invalid(_))
        ));
    }

    #[test]
    fn unmount_marks_clean_and_mount_marks_dirty() {
        let (fs, _dir) = fresh_fs(16);
        let mut img = fs.unmount().unwrap();
        let mut raw = vec![0u8; SBSIZE];
        img.read_sectors(SBOFF / DEV_BSIZE, &mut raw).unwrap();
        let sb = Superblock::parse(&raw[..SB_STRUCT_SIZE]).unwrap();
        assert_eq!(sb.clean, 1);
        let fs = Fs::mount(img, 'a').unwrap();
        let mut img = fs.img;
        img.read_sectors(SBOFF / DEV_BSIZE, &mut raw).unwrap();
        let sb = Superblock::parse(&raw[..SB_STRUCT_SIZE]).unwrap();
        assert_eq!(sb.clean, 0);
    }

    #[test]
    fn cg_round_trip_through_cache() {
        let (mut fs, _dir) = fresh_fs(16);
        let (id, mut cg) = fs.cg_bread(0).unwrap();
        let was = cg.rotor;
        cg.rotor = 99;
        fs.cg_bwrite(id, &cg, WriteHow::Sync).unwrap();
        let (id2, cg2) = fs.cg_bread(0).unwrap();
        assert_eq!(cg2.rotor, 99);
        assert_ne!(cg2.rotor, was);
        fs.cache.brelse(id2);
    }
}
