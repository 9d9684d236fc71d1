use std::time::Instant;

use ffs_arena::model::{run_model, ModelConfig};
use ffs_arena::volume::{mkfs, VolumeOptions};
use ffs_arena::{FlashChip, FlashGeometry, FsKind};

fn run(kind: FsKind, seed: u64, ops: usize) {
    run_on(kind, seed, ops, 256, 3 << 20);
}

fn run_on(kind: FsKind, seed: u64, ops: usize, blocks: u32, max_bytes: u64) {
    let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
    let part = chip.full_partition();
    let fs = mkfs(chip, part, &VolumeOptions::new(kind).with_seed(seed)).unwrap();
    let cfg = ModelConfig {
        ops,
        seed,
        max_bytes,
        ..ModelConfig::default()
    };
    let t = Instant::now();
    let (res, vfs) = run_model(fs, cfg);
    let report = res.unwrap_or_else(|m| panic!("{}: {m}", kind.name()));
    assert_eq!(report.ops, ops);
    assert_eq!(report.remounts, 5);
    assert_eq!(vfs.fs().chip().rejected_programs(), 0);
    eprintln!("{} seed {seed}: {:?} in {:?}", kind.name(), report, t.elapsed());
}

#[test]
fn jffs2_matches_model() {
    run(FsKind::Jffs2, 11, 10_000);
}

#[test]
fn yaffs2_matches_model() {
    run(FsKind::Yaffs2, 12, 10_000);
}

#[test]
fn ubifs_matches_model() {
    run(FsKind::Ubifs, 13, 10_000);
}

#[test]
fn short_runs_other_seeds() {
    for kind in FsKind::ALL {
        for seed in 100..104 {
            run(kind, seed, 1500);
        }
    }
}

#[test]
fn tight_partition_forces_gc() {
    for kind in FsKind::ALL {
        for seed in 200..203 {
            run_on(kind, seed, 4000, 40, 2 << 20);
        }
    }
}
