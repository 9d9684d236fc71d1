use ffs_arena::treegen::{apply, gen_content, generate, plan, Distribution, TreeSpec, MISSING_NAME};
use ffs_arena::vfs::{find_missing, readdir_recursive, FileKind};
use ffs_arena::volume::{self, VolumeOptions};
use ffs_arena::{FlashChip, FlashGeometry, FsError, FsKind, Vfs};

fn volume(kind: FsKind, blocks: u32) -> Vfs {
    let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
    let part = chip.full_partition();
    let mut v = Vfs::new(volume::mkfs(chip, part, &VolumeOptions::new(kind)).unwrap());
    v.mount().unwrap();
    v
}

#[test]
fn generated_tree_matches_manifest_on_every_fs() {
    let spec = TreeSpec {
        depth: 3,
        ..TreeSpec::s2(3, 9)
    };
    for kind in FsKind::ALL {
        let mut v = volume(kind, 64);
        v.mkdir("/t").unwrap();
        let g = generate(&spec, &mut v, "/t").unwrap();
        assert!(!g.incomplete);
        // Levels 0..3 of a binary tree: 1 + 2 + 4 + 8 directories.
        assert_eq!(g.manifest.dirs, 15);
        assert_eq!(g.manifest.files, 45);
        v.unmount().unwrap();
        v.mount().unwrap();
        let listing = readdir_recursive(&mut v, "/t").unwrap();
        assert_eq!(listing.len() as u64, g.manifest.dirs - 1 + g.manifest.files);
        for e in g.manifest.entries.iter().filter(|e| e.kind == FileKind::File) {
            let want = gen_content(e.content_seed, e.size as usize, spec.compressibility);
            assert_eq!(v.read_file(&e.path).unwrap(), want, "{} {}", kind.name(), e.path);
        }
        let r = find_missing(&mut v, "/t", MISSING_NAME).unwrap();
        assert_eq!(r.matches, 0);
        assert_eq!(r.visited, g.manifest.dirs - 1 + g.manifest.files);
    }
}

#[test]
fn out_of_space_stops_with_partial_manifest() {
    let spec = TreeSpec {
        file_size: Distribution::Constant(60_000),
        ..TreeSpec::s2(8, 1)
    };
    let mut v = volume(FsKind::Yaffs2, 24);
    let g = generate(&spec, &mut v, "/").unwrap();
    assert!(g.incomplete);
    let full = plan(&spec, "/").unwrap();
    assert!(g.manifest.entries.len() < full.entries.len());
    assert_eq!(g.manifest.entries[..], full.entries[..g.manifest.entries.len()]);
    for e in &g.manifest.entries {
        v.stat(&e.path).unwrap();
    }
}

#[test]
fn generating_into_a_file_is_refused() {
    let mut v = volume(FsKind::Ubifs, 32);
    v.create_file("/f").unwrap();
    assert!(matches!(generate(&TreeSpec::s2(1, 1), &mut v, "/f"), Err(FsError::NotADirectory(_))));
    assert!(matches!(generate(&TreeSpec::s2(1, 1), &mut v, "/nope"), Err(FsError::NotFound(_))));
}

#[test]
fn spec_text_round_trip_and_apply_is_replayable() {
    let spec = TreeSpec::s1(77);
    assert_eq!(TreeSpec::parse(&spec.to_text()).unwrap(), spec);
    let m = plan(&spec, "/").unwrap();
    let mut a = volume(FsKind::Jffs2, 128);
    let mut b = volume(FsKind::Jffs2, 128);
    apply(&m, &mut a).unwrap();
    apply(&m, &mut b).unwrap();
    assert_eq!(a.fs().chip().elapsed(), b.fs().chip().elapsed());
    assert!(a.fs().chip() == b.fs().chip());
}
