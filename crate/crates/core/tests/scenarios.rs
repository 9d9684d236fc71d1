use ffs_arena::bench::{
    self, build_image, flash_image, programmed_bytes, run_s1, run_s2, s1_corpus, BenchReport,
    ScenarioConfig, SweepAxis, S1_STEPS, S2_STEPS,
};
use ffs_arena::treegen::{plan, TreeSpec};
use ffs_arena::volume::{self, VolumeOptions};
use ffs_arena::vfs::{readdir_recursive, FileKind};
use ffs_arena::{FlashChip, FlashGeometry, FsKind, Partition, Vfs};

fn small_s2(kind: FsKind, files: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(kind);
    c.partition_mb = 16;
    c.file_count = files;
    c
}

fn steps(r: &BenchReport) -> Vec<&str> {
    r.steps.iter().map(|s| s.step.as_str()).collect()
}

/// Every microsecond of a step is a flash latency or a charged CPU cost.
fn assert_accounting(r: &BenchReport) {
    let g = FlashGeometry::default();
    for s in &r.steps {
        let flash = s.reads * g.read_latency_us + s.writes * g.write_latency_us + s.erases * g.erase_latency_us;
        assert_eq!(s.duration_us, flash + s.cpu_us, "{} {}", r.config.ffs.name(), s.step);
    }
}

#[test]
fn s1_step_list_and_cache_effect() {
    for kind in FsKind::ALL {
        let r = run_s1(&ScenarioConfig::new(kind)).unwrap();
        assert_eq!(steps(&r), S1_STEPS);
        assert!(r.complete);
        assert_accounting(&r);
        assert!(r.duration("ls_r_2") < r.duration("ls_r_1"), "{}", kind.name());
        assert!(r.steps[0].image_bytes > 0);
        assert_eq!(r.steps[0].image_bytes, r.steps[1].image_bytes);
        assert!(r.tree_files > 0);
    }
}

#[test]
fn s2_step_list_and_checkpoint_effect() {
    for kind in FsKind::ALL {
        let r = run_s2(&small_s2(kind, 250)).unwrap();
        assert_eq!(steps(&r), S2_STEPS);
        assert_accounting(&r);
        // 250 files over 63 directories at 4 per directory.
        assert_eq!(r.tree_files, 252);
        assert_eq!(r.tree_dirs, 63);
        if kind == FsKind::Yaffs2 {
            assert!(r.duration("mount_2") < r.duration("mount"));
        }
        let warm = r.step("warm_up").unwrap();
        assert!(warm.writes > 0);
    }
}

#[test]
fn ubifs_mount_records_attach_time() {
    let r = run_s2(&small_s2(FsKind::Ubifs, 250)).unwrap();
    let m = r.step("mount_2").unwrap();
    let attach = m.attach_us.unwrap();
    assert!(attach > 0 && attach < m.duration_us);
    assert!(run_s2(&small_s2(FsKind::Jffs2, 250)).unwrap().step("mount").unwrap().attach_us.is_none());
}

#[test]
fn single_value_sweep_equals_one_run() {
    let base = small_s2(FsKind::Yaffs2, 500);
    let s = bench::sweep(&base, SweepAxis::FileCount, &[500]).unwrap();
    let mut one = run_s2(&base).unwrap();
    one.axis_value = Some(500);
    assert_eq!(s.reports, vec![one]);
    assert!(bench::sweep(&base, SweepAxis::FileCount, &[]).is_err());
}

#[test]
fn sweep_reports_and_fits() {
    let base = small_s2(FsKind::Jffs2, 0);
    let s = bench::sweep(&base, SweepAxis::FileCount, &[126, 252, 504]).unwrap();
    assert_eq!(s.reports.len(), 3);
    let create = s.fits.iter().find(|f| f.step == "create_tree").unwrap();
    assert!(create.fit.slope > 0.0);
    assert!(create.fit.r2 > 0.95);
    let csv = bench::emit(&s.reports, bench::Format::Csv);
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3 * S2_STEPS.len() + 1);
}

#[test]
fn partition_axis_scales_mount() {
    let mut base = small_s2(FsKind::Yaffs2, 126);
    base.partition_mb = 0;
    let s = bench::sweep(&base, SweepAxis::PartitionSize, &[16, 32, 64]).unwrap();
    let mount = s.fits.iter().find(|f| f.step == "mount").unwrap();
    assert!(mount.fit.r2 >= 0.98);
    assert!(mount.fit.slope > 0.0);
}

#[test]
fn flashed_image_mounts_with_the_corpus() {
    let corpus = s1_corpus(5);
    for kind in FsKind::ALL {
        let part = Partition::new(0, 800);
        let opts = VolumeOptions::new(kind);
        let src = build_image(&opts, part, &corpus).unwrap();
        let mut dst = FlashChip::new(FlashGeometry::default()).unwrap();
        flash_image(&src, &mut dst, &part).unwrap();
        assert_eq!(programmed_bytes(&src, &part), programmed_bytes(&dst, &part));
        let mut vfs = Vfs::new(volume::open(dst, part, &opts).unwrap());
        vfs.mount().unwrap();
        let listing = readdir_recursive(&mut vfs, "/").unwrap();
        assert_eq!(listing.len() as u64, corpus.dirs - 1 + corpus.files);
        let f = corpus.entries.iter().find(|e| e.kind == FileKind::File && e.size > 0).unwrap();
        assert_eq!(vfs.read_file(&f.path).unwrap().len() as u64, f.size);
    }
}

#[test]
fn s1_tree_plan_is_the_same_for_every_fs() {
    let spec = TreeSpec::s1(42);
    let a = plan(&spec, "/gen").unwrap();
    let b = plan(&spec, "/gen").unwrap();
    assert_eq!(a, b);
    let reports: Vec<_> = FsKind::ALL
        .iter()
        .map(|&k| {
            let mut c = ScenarioConfig::new(k);
            c.seed = 42;
            run_s1(&c).unwrap()
        })
        .collect();
    for r in &reports {
        assert_eq!((r.tree_files, r.tree_dirs), (a.files, a.dirs));
    }
}
