//! Deterministic NAND flash simulator and flash file system models.

pub mod bench;
pub mod codec;
pub mod error;
pub mod flash;
pub mod jffs2;
pub mod model;
pub mod treegen;
pub mod ubi;
pub mod ubifs;
pub mod volume;
pub mod yaffs2;
pub mod vfs;
pub mod wire;

pub use codec::Codec;
pub use error::{FsError, FsResult};
pub use flash::{FlashChip, FlashError, FlashGeometry, OpCounters, Partition};
pub use vfs::{FlashFs, FsKind, Vfs};
