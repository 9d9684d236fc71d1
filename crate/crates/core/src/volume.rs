//! Builds any of the three file systems from one set of options.

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::FsResult;
use crate::flash::{FlashChip, Partition};
use crate::jffs2::{Jffs2, Jffs2Config};
use crate::ubifs::{Ubifs, UbifsConfig};
use crate::vfs::{FlashFs, FsKind};
use crate::yaffs2::{Yaffs2, Yaffs2Config};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeOptions {
    pub kind: FsKind,
    /// `None` picks the file system's default codec.
    pub codec: Option<Codec>,
    pub seed: u64,
    pub yaffs_checkpoint: bool,
    /// Pack JFFS2 nodes back to back (offline image building).
    pub jffs2_pack_nodes: bool,
}

impl VolumeOptions {
    pub fn new(kind: FsKind) -> Self {
        Self {
            kind,
            codec: None,
            seed: 0,
            yaffs_checkpoint: true,
            jffs2_pack_nodes: false,
        }
    }

    pub fn with_codec(mut self, codec: Codec) -> Self {
        self.codec = Some(codec);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Options for building an image offline, the way mkfs-style tools do:
    /// packed JFFS2 nodes and no YAFFS2 checkpoint.
    pub fn image_builder(mut self) -> Self {
        self.jffs2_pack_nodes = true;
        self.yaffs_checkpoint = false;
        self
    }

    /// Codec actually used. YAFFS2 stores data uncompressed.
    pub fn effective_codec(&self) -> Codec {
        match self.kind {
            FsKind::Yaffs2 => Codec::None,
            FsKind::Jffs2 => self.codec.unwrap_or(Jffs2Config::default().codec),
            FsKind::Ubifs => self.codec.unwrap_or(UbifsConfig::default().codec),
        }
    }

    fn jffs2(&self) -> Jffs2Config {
        Jffs2Config {
            codec: self.effective_codec(),
            seed: self.seed,
            pack_nodes: self.jffs2_pack_nodes,
            ..Jffs2Config::default()
        }
    }

    fn yaffs2(&self) -> Yaffs2Config {
        Yaffs2Config {
            checkpoint: self.yaffs_checkpoint,
            ..Yaffs2Config::default()
        }
    }

    fn ubifs(&self) -> UbifsConfig {
        UbifsConfig {
            codec: self.effective_codec(),
            ..UbifsConfig::default()
        }
    }
}

/// Formats the partition and returns the (unmounted) file system.
pub fn mkfs(chip: FlashChip, part: Partition, opts: &VolumeOptions) -> FsResult<Box<dyn FlashFs>> {
    Ok(match opts.kind {
        FsKind::Jffs2 => Box::new(Jffs2::mkfs(chip, part, opts.jffs2())?),
        FsKind::Yaffs2 => Box::new(Yaffs2::mkfs(chip, part, opts.yaffs2())?),
        FsKind::Ubifs => Box::new(Ubifs::mkfs(chip, part, opts.ubifs())?),
    })
}

/// Wraps an already formatted partition without touching the flash.
pub fn open(chip: FlashChip, part: Partition, opts: &VolumeOptions) -> FsResult<Box<dyn FlashFs>> {
    Ok(match opts.kind {
        FsKind::Jffs2 => Box::new(Jffs2::open(chip, part, opts.jffs2())?),
        FsKind::Yaffs2 => Box::new(Yaffs2::open(chip, part, opts.yaffs2())?),
        FsKind::Ubifs => Box::new(Ubifs::open(chip, part, opts.ubifs())?),
    })
}
