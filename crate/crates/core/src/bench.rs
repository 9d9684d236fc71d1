//! Scenario engine: S1 (image, mount, listings, tree creation) and S2
//! (warm-up, tree creation, remount, lookup of a missing name, deletion),
//! sweeps over file count or partition size, and CSV/JSON emission.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, FlashGeometry, OpCounters, PageState, Partition};
use crate::treegen::{self, gen_content, ManifestEntry, TreeManifest, TreeSpec, MISSING_NAME};
use crate::vfs::{find_missing, join, readdir_recursive, FileKind, FlashFs, FsKind, Vfs};
use crate::volume::{self, VolumeOptions};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const S1_STEPS: [&str; 7] = [
    "build_image",
    "flash_image",
    "mount",
    "ls_r_1",
    "ls_r_2",
    "gen_tree",
    "unmount",
];

pub const S2_STEPS: [&str; 10] = [
    "erase",
    "mkfs",
    "mount",
    "warm_up",
    "create_tree",
    "unmount",
    "mount_2",
    "find",
    "delete_tree",
    "unmount_2",
];

/// Root file system corpus statistics.
pub const CORPUS_DIRS: usize = 213;
pub const CORPUS_FILES: usize = 1122;
pub const CORPUS_MEAN_SIZE: f64 = 13_312.0;
pub const CORPUS_COMPRESSIBILITY: f64 = 0.6;

/// Depth-5 binary tree: 63 directories share the requested file count.
pub const S2_DIRS: u64 = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S1,
    S2,
}

impl Scenario {
    pub fn parse(s: &str) -> FsResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Scenario::S1),
            "s2" => Ok(Scenario::S2),
            other => Err(FsError::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub ffs: FsKind,
    pub codec: Option<Codec>,
    pub partition_mb: u64,
    /// Overrides the scenario's built-in tree.
    pub tree: Option<TreeSpec>,
    pub seed: u64,
    /// S2 only: files spread over the 63 directories.
    pub file_count: u64,
    pub wallclock: bool,
}

impl ScenarioConfig {
    pub fn new(ffs: FsKind) -> Self {
        Self {
            ffs,
            codec: None,
            partition_mb: 100,
            tree: None,
            seed: 1,
            file_count: 1000,
            wallclock: false,
        }
    }

    pub fn volume(&self) -> VolumeOptions {
        let mut v = VolumeOptions::new(self.ffs).with_seed(self.seed);
        v.codec = self.codec;
        v
    }

    pub fn geometry(&self) -> FlashGeometry {
        FlashGeometry::default()
    }

    pub fn validate(&self) -> FsResult<Partition> {
        let g = self.geometry();
        if self.partition_mb == 0 {
            return Err(FsError::Config("partition size must be positive".into()));
        }
        let blocks = g.blocks_for_mib(self.partition_mb);
        if blocks > g.blocks_per_chip {
            return Err(FsError::Config(format!(
                "{} MB partition does not fit a {} MB chip",
                self.partition_mb,
                g.chip_bytes() >> 20
            )));
        }
        if let Some(t) = &self.tree {
            t.validate()?;
        }
        Ok(Partition::new(0, blocks))
    }

    /// Tree built by S2: a constant number of files per directory.
    pub fn s2_tree(&self) -> TreeSpec {
        self.tree.clone().unwrap_or_else(|| {
            let per_dir = (self.file_count as f64 / S2_DIRS as f64).round().max(0.0) as u64;
            TreeSpec::s2(per_dir, self.seed)
        })
    }

    pub fn s1_tree(&self) -> TreeSpec {
        self.tree.clone().unwrap_or_else(|| TreeSpec::s1(self.seed))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub duration_us: u64,
    pub reads: u64,
    pub writes: u64,
    pub erases: u64,
    pub cpu_us: u64,
    pub meta_ram_bytes: u64,
    pub used_flash_bytes: u64,
    pub image_bytes: u64,
    /// Split of a mount step into volume attach and file system mount.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attach_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub tool_version: String,
    pub config: ScenarioConfig,
    pub codec: Codec,
    pub axis_value: Option<u64>,
    /// Entries created by the tree step.
    pub tree_files: u64,
    pub tree_dirs: u64,
    pub steps: Vec<StepRecord>,
    pub complete: bool,
    pub error: Option<String>,
}

impl BenchReport {
    fn new(scenario: Scenario, config: &ScenarioConfig) -> Self {
        Self {
            scenario,
            tool_version: TOOL_VERSION.to_string(),
            config: config.clone(),
            codec: config.volume().effective_codec(),
            axis_value: None,
            tree_files: 0,
            tree_dirs: 0,
            steps: Vec::new(),
            complete: false,
            error: None,
        }
    }

    pub fn step(&self, name: &str) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == name)
    }

    /// Duration of a step; panics if the step did not run.
    pub fn duration(&self, name: &str) -> u64 {
        self.step(name)
            .unwrap_or_else(|| panic!("step {name} missing"))
            .duration_us
    }
}

/// Bytes held by programmed pages of a partition.
pub fn programmed_bytes(chip: &FlashChip, part: &Partition) -> u64 {
    let g = chip.geometry();
    let pages = part.block_count * g.pages_per_block;
    let n = (0..pages)
        .filter(|&p| chip.page_state(part, p) == Ok(PageState::Programmed))
        .count() as u64;
    n * g.page_data_bytes as u64
}

struct Meter {
    t0: u64,
    c0: OpCounters,
    wall: Instant,
}

impl Meter {
    fn start(chip: &FlashChip) -> Self {
        Self {
            t0: chip.elapsed(),
            c0: chip.counters(),
            wall: Instant::now(),
        }
    }

    fn finish(self, name: &str, chip: &FlashChip, fs: Option<&dyn FlashFs>, wallclock: bool) -> StepRecord {
        let d = chip.counters().since(&self.c0);
        StepRecord {
            step: name.to_string(),
            duration_us: chip.elapsed() - self.t0,
            reads: d.reads,
            writes: d.writes,
            erases: d.erases,
            cpu_us: d.cpu_us,
            meta_ram_bytes: fs.filter(|f| f.is_mounted()).map(|f| f.meta_ram_bytes()).unwrap_or(0),
            used_flash_bytes: fs.filter(|f| f.is_mounted()).map(|f| f.used_flash_bytes()).unwrap_or(0),
            image_bytes: 0,
            attach_us: None,
            wall_us: wallclock.then(|| self.wall.elapsed().as_micros() as u64),
        }
    }
}

/// Runs `f` on the volume and records it as one step.
fn timed<T>(
    report: &mut BenchReport,
    vfs: &mut Vfs,
    name: &str,
    f: impl FnOnce(&mut Vfs) -> FsResult<T>,
) -> FsResult<T> {
    let m = Meter::start(vfs.fs().chip());
    let r = f(vfs);
    let mut rec = m.finish(name, vfs.fs().chip(), Some(vfs.fs()), report.config.wallclock);
    if name.starts_with("mount") {
        rec.attach_us = vfs.fs().mount_breakdown().map(|(a, _)| a);
    }
    report.steps.push(rec);
    r
}

/// Root file system corpus: a fixed-shape tree whose aggregate statistics
/// (directory and file counts, mean file size) are pinned; the seed picks
/// the shape and contents.
pub fn s1_corpus(seed: u64) -> TreeManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(treegen::seed_for(seed, "corpus"));
    let mut m = TreeManifest::new("/", CORPUS_COMPRESSIBILITY);
    // (path, depth, subdirs, files)
    let mut dirs: Vec<(String, u32, u32, u32)> = vec![("/".to_string(), 0, 0, 0)];
    for _ in 1..CORPUS_DIRS {
        // Prefer shallow parents so the tree stays rootfs-like.
        let parent = loop {
            let i = rng.random_range(0..dirs.len());
            if rng.random_range(0..=dirs[i].1 + 1) <= 1 {
                break i;
            }
        };
        let k = dirs[parent].2;
        dirs[parent].2 += 1;
        let path = join(&dirs[parent].0, &format!("d{k:03}"));
        let depth = dirs[parent].1 + 1;
        m.push(ManifestEntry {
            path: path.clone(),
            kind: FileKind::Dir,
            size: 0,
            content_seed: 0,
        });
        dirs.push((path, depth, 0, 0));
    }
    let sizes = Exp::new(1.0 / CORPUS_MEAN_SIZE).expect("rate");
    let mut raw: Vec<u64> = (0..CORPUS_FILES).map(|_| sizes.sample(&mut rng).round() as u64).collect();
    // Pin the mean exactly.
    let total: u64 = raw.iter().sum();
    let want = (CORPUS_MEAN_SIZE * CORPUS_FILES as f64) as u64;
    for s in raw.iter_mut() {
        *s = (*s as u128 * want as u128 / total.max(1) as u128) as u64;
    }
    for size in raw {
        let d = rng.random_range(0..dirs.len());
        let k = dirs[d].3;
        dirs[d].3 += 1;
        m.push(ManifestEntry {
            path: join(&dirs[d].0, &format!("f{k:03}")),
            kind: FileKind::File,
            size,
            content_seed: rng.random(),
        });
    }
    m
}

/// Builds an image of `manifest` offline and returns the programmed chip.
pub fn build_image(
    opts: &VolumeOptions,
    part: Partition,
    manifest: &TreeManifest,
) -> FsResult<FlashChip> {
    let chip = FlashChip::new(FlashGeometry::default())?;
    let fs = volume::mkfs(chip, part, &opts.image_builder())?;
    let mut vfs = Vfs::new(fs);
    vfs.mount()?;
    let g = treegen::apply(manifest, &mut vfs)?;
    if g.incomplete {
        return Err(FsError::NoSpace);
    }
    vfs.unmount()?;
    Ok(vfs.into_fs().into_chip())
}

/// Copies every programmed page of `part` from `src` to `dst`, erasing any
/// destination block that is not already blank.
pub fn flash_image(src: &FlashChip, dst: &mut FlashChip, part: &Partition) -> FsResult<()> {
    let ppb = src.geometry().pages_per_block;
    for b in 0..part.block_count {
        let dirty = (0..ppb).any(|p| dst.page_state(part, b * ppb + p) == Ok(PageState::Programmed));
        if dirty {
            dst.erase_block(part, b)?;
        }
    }
    let mut src = src.clone();
    for p in 0..part.block_count * ppb {
        if src.page_state(part, p)? != PageState::Programmed {
            continue;
        }
        let page = src.read_page(part, p)?;
        let (data, oob) = (page.data.to_vec(), page.oob.to_vec());
        dst.program_page(part, p, &data, &oob)?;
    }
    Ok(())
}

fn fail(mut report: BenchReport, e: FsError) -> Result<BenchReport, (BenchReport, FsError)> {
    report.error = Some(e.to_string());
    Err((report, e))
}

pub type RunResult = Result<BenchReport, (BenchReport, FsError)>;

pub fn run_s1(cfg: &ScenarioConfig) -> RunResult {
    let mut report = BenchReport::new(Scenario::S1, cfg);
    let part = match cfg.validate() {
        Ok(p) => p,
        Err(e) => return fail(report, e),
    };
    let opts = cfg.volume();
    let corpus = s1_corpus(cfg.seed);

    // Step 1 runs on the build host's scratch chip.
    let wall = Instant::now();
    let scratch = match build_image(&opts, part, &corpus) {
        Ok(c) => c,
        Err(e) => return fail(report, e),
    };
    let d = scratch.counters();
    report.steps.push(StepRecord {
        step: "build_image".into(),
        duration_us: scratch.elapsed(),
        reads: d.reads,
        writes: d.writes,
        erases: d.erases,
        cpu_us: d.cpu_us,
        image_bytes: programmed_bytes(&scratch, &part),
        wall_us: cfg.wallclock.then(|| wall.elapsed().as_micros() as u64),
        ..Default::default()
    });

    let mut chip = match FlashChip::new(cfg.geometry()) {
        Ok(c) => c,
        Err(e) => return fail(report, e.into()),
    };
    let m = Meter::start(&chip);
    if let Err(e) = flash_image(&scratch, &mut chip, &part) {
        return fail(report, e);
    }
    let mut rec = m.finish("flash_image", &chip, None, cfg.wallclock);
    rec.image_bytes = report.steps[0].image_bytes;
    report.steps.push(rec);

    let fs = match volume::open(chip, part, &opts) {
        Ok(f) => f,
        Err(e) => return fail(report, e),
    };
    let mut vfs = Vfs::new(fs);
    let tree = cfg.s1_tree();
    let res = (|| {
        timed(&mut report, &mut vfs, "mount", |v| v.mount())?;
        timed(&mut report, &mut vfs, "ls_r_1", |v| readdir_recursive(v, "/"))?;
        timed(&mut report, &mut vfs, "ls_r_2", |v| readdir_recursive(v, "/"))?;
        let g = timed(&mut report, &mut vfs, "gen_tree", |v| {
            v.mkdir("/gen")?;
            treegen::generate(&tree, v, "/gen")
        })?;
        report.tree_files = g.manifest.files;
        report.tree_dirs = g.manifest.dirs;
        if g.incomplete {
            return Err(FsError::NoSpace);
        }
        timed(&mut report, &mut vfs, "unmount", |v| v.unmount())
    })();
    match res {
        Ok(()) => {
            report.complete = true;
            Ok(report)
        }
        Err(e) => fail(report, e),
    }
}

/// Creates a partition-filling file of incompressible data, then deletes it.
fn warm_up(vfs: &mut Vfs, seed: u64) -> FsResult<u64> {
    let size = vfs.fs().free_bytes() / 100 * 95;
    vfs.create_file("/warmup")?;
    let chunk = 1 << 20;
    let mut off = 0u64;
    let mut i = 0u64;
    while off < size {
        let n = chunk.min((size - off) as usize);
        let data = gen_content(treegen::seed_for(seed, "warmup") ^ i, n, 0.0);
        vfs.write_file("/warmup", off, &data)?;
        off += n as u64;
        i += 1;
    }
    vfs.delete_file("/warmup")?;
    Ok(size)
}

/// Deletes every file of the manifest, then its directories bottom-up.
pub fn delete_tree(vfs: &mut Vfs, manifest: &TreeManifest) -> FsResult<()> {
    for p in manifest.file_paths() {
        vfs.delete_file(p)?;
    }
    for d in manifest.dirs_bottom_up() {
        vfs.rmdir(d)?;
    }
    Ok(())
}

pub fn run_s2(cfg: &ScenarioConfig) -> RunResult {
    let mut report = BenchReport::new(Scenario::S2, cfg);
    let part = match cfg.validate() {
        Ok(p) => p,
        Err(e) => return fail(report, e),
    };
    let opts = cfg.volume();
    let mut chip = match FlashChip::new(cfg.geometry()) {
        Ok(c) => c,
        Err(e) => return fail(report, e.into()),
    };
    let m = Meter::start(&chip);
    for b in 0..part.block_count {
        if let Err(e) = chip.erase_block(&part, b) {
            return fail(report, e.into());
        }
    }
    report.steps.push(m.finish("erase", &chip, None, cfg.wallclock));

    let m = Meter::start(&chip);
    let probe = chip.clone();
    let fs = match volume::mkfs(chip, part, &opts) {
        Ok(f) => f,
        Err(e) => return fail(report, e),
    };
    // mkfs consumed the chip; measure against the returned one.
    let mut rec = m.finish("mkfs", fs.chip(), None, cfg.wallclock);
    rec.duration_us = fs.chip().elapsed() - probe.elapsed();
    report.steps.push(rec);

    let mut vfs = Vfs::new(fs);
    let tree = cfg.s2_tree();
    let res = (|| {
        timed(&mut report, &mut vfs, "mount", |v| v.mount())?;
        timed(&mut report, &mut vfs, "warm_up", |v| warm_up(v, cfg.seed))?;
        let g = timed(&mut report, &mut vfs, "create_tree", |v| {
            treegen::generate(&tree, v, "/")
        })?;
        report.tree_files = g.manifest.files;
        report.tree_dirs = g.manifest.dirs;
        if g.incomplete {
            return Err(FsError::NoSpace);
        }
        timed(&mut report, &mut vfs, "unmount", |v| v.unmount())?;
        timed(&mut report, &mut vfs, "mount_2", |v| v.mount())?;
        let found = timed(&mut report, &mut vfs, "find", |v| find_missing(v, "/", MISSING_NAME))?;
        if found.matches != 0 {
            return Err(FsError::Corrupt(format!("{MISSING_NAME} found")));
        }
        timed(&mut report, &mut vfs, "delete_tree", |v| delete_tree(v, &g.manifest))?;
        timed(&mut report, &mut vfs, "unmount_2", |v| v.unmount())
    })();
    match res {
        Ok(()) => {
            report.complete = true;
            Ok(report)
        }
        Err(e) => fail(report, e),
    }
}

pub fn run(scenario: Scenario, cfg: &ScenarioConfig) -> RunResult {
    match scenario {
        Scenario::S1 => run_s1(cfg),
        Scenario::S2 => run_s2(cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FileCount,
    PartitionSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> FsResult<Self> {
        match s {
            "file_count" | "files" => Ok(SweepAxis::FileCount),
            "partition_size" | "partition" => Ok(SweepAxis::PartitionSize),
            other => Err(FsError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through the points. A perfect fit, including the
/// degenerate zero-variance one, has R² = 1.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    if points.is_empty() {
        return LinearFit {
            slope: 0.0,
            intercept: 0.0,
            r2: 1.0,
        };
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    LinearFit {
        slope,
        intercept,
        r2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub ffs: FsKind,
    pub step: String,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub reports: Vec<BenchReport>,
    pub fits: Vec<StepFit>,
}

/// Runs S2 once per axis value.
pub fn sweep(base: &ScenarioConfig, axis: SweepAxis, values: &[u64]) -> Result<SweepResult, (Vec<BenchReport>, FsError)> {
    if values.is_empty() {
        return Err((Vec::new(), FsError::Config("sweep needs at least one value".into())));
    }
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::FileCount => cfg.file_count = v,
            SweepAxis::PartitionSize => cfg.partition_mb = v,
        }
        match run_s2(&cfg) {
            Ok(mut r) => {
                r.axis_value = Some(v);
                reports.push(r);
            }
            Err((mut r, e)) => {
                r.axis_value = Some(v);
                reports.push(r);
                return Err((reports, e));
            }
        }
    }
    let fits = fit_steps(&reports);
    Ok(SweepResult {
        axis,
        reports,
        fits,
    })
}

/// Fits duration against axis value for each (file system, step) pair.
pub fn fit_steps(reports: &[BenchReport]) -> Vec<StepFit> {
    let mut fits = Vec::new();
    let mut kinds: Vec<FsKind> = reports.iter().map(|r| r.config.ffs).collect();
    kinds.sort();
    kinds.dedup();
    for ffs in kinds {
        let rs: Vec<&BenchReport> = reports.iter().filter(|r| r.config.ffs == ffs).collect();
        let Some(first) = rs.first() else { continue };
        for s in &first.steps {
            let pts: Vec<(f64, f64)> = rs
                .iter()
                .filter_map(|r| Some((r.axis_value? as f64, r.step(&s.step)?.duration_us as f64)))
                .collect();
            fits.push(StepFit {
                ffs,
                step: s.step.clone(),
                fit: linear_fit(&pts),
            });
        }
    }
    fits
}

pub const CSV_HEADER: &str =
    "ffs,codec,axis_value,step,duration_us,reads,writes,erases,meta_ram_bytes,image_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> FsResult<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(FsError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// One emitted table row: a step of one report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub ffs: String,
    pub codec: String,
    pub axis_value: Option<u64>,
    pub step: String,
    pub duration_us: u64,
    pub reads: u64,
    pub writes: u64,
    pub erases: u64,
    pub meta_ram_bytes: u64,
    pub image_bytes: u64,
}

pub fn rows(reports: &[BenchReport]) -> Vec<Row> {
    reports
        .iter()
        .flat_map(|r| {
            r.steps.iter().map(move |s| Row {
                ffs: r.config.ffs.name().to_string(),
                codec: r.codec.name().to_string(),
                axis_value: r.axis_value,
                step: s.step.clone(),
                duration_us: s.duration_us,
                reads: s.reads,
                writes: s.writes,
                erases: s.erases,
                meta_ram_bytes: s.meta_ram_bytes,
                image_bytes: s.image_bytes,
            })
        })
        .collect()
}

/// Serializes one row per step.
pub fn emit(reports: &[BenchReport], format: Format) -> Vec<u8> {
    emit_rows(&rows(reports), format)
}

pub fn emit_rows(rows: &[Row], format: Format) -> Vec<u8> {
    match format {
        Format::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.ffs,
                    r.codec,
                    r.axis_value.map(|v| v.to_string()).unwrap_or_default(),
                    r.step,
                    r.duration_us,
                    r.reads,
                    r.writes,
                    r.erases,
                    r.meta_ram_bytes,
                    r.image_bytes
                ));
            }
            out.into_bytes()
        }
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(rows).expect("serializable");
            v.push(b'\n');
            v
        }
    }
}

/// Reads rows written by [`emit_rows`] in either format.
pub fn parse_rows(text: &str) -> FsResult<Vec<Row>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| FsError::Config(format!("bad JSON rows: {e}")));
    }
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(FsError::Config("missing CSV header".into()));
    }
    let num = |s: &str, line: usize| {
        s.parse::<u64>()
            .map_err(|_| FsError::Config(format!("line {line}: bad number {s:?}")))
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let n = i + 2;
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(FsError::Config(format!("line {n}: expected 10 fields")));
        }
        out.push(Row {
            ffs: f[0].to_string(),
            codec: f[1].to_string(),
            axis_value: if f[2].is_empty() { None } else { Some(num(f[2], n)?) },
            step: f[3].to_string(),
            duration_us: num(f[4], n)?,
            reads: num(f[5], n)?,
            writes: num(f[6], n)?,
            erases: num(f[7], n)?,
            meta_ram_bytes: num(f[8], n)?,
            image_bytes: num(f[9], n)?,
        });
    }
    Ok(out)
}

/// Fits duration against axis value per (file system, step) over rows that
/// carry an axis value. Keys come out in first-seen order.
pub fn fit_rows(rows: &[Row]) -> Vec<(String, String, usize, LinearFit)> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.axis_value.is_some()) {
        let k = (r.ffs.clone(), r.step.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(ffs, step)| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.ffs == ffs && r.step == step)
                .filter_map(|r| Some((r.axis_value? as f64, r.duration_us as f64)))
                .collect();
            let n = pts.len();
            (ffs, step, n, linear_fit(&pts))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert_eq!(linear_fit(&[(1.0, 7.0), (2.0, 7.0)]).r2, 1.0);
        assert!(linear_fit(&[(1.0, 0.0), (2.0, 10.0), (3.0, 0.0)]).r2 < 0.5);
    }

    #[test]
    fn corpus_statistics() {
        let m = s1_corpus(1);
        assert_eq!(m.dirs as usize, CORPUS_DIRS);
        assert_eq!(m.files as usize, CORPUS_FILES);
        let mean = m.bytes as f64 / m.files as f64;
        assert!((mean - CORPUS_MEAN_SIZE).abs() < 2.0, "{mean}");
        assert_eq!(s1_corpus(1), m);
        let mut seen = std::collections::HashSet::new();
        assert!(m.entries.iter().all(|e| seen.insert(e.path.clone())));
    }

    #[test]
    fn rows_round_trip_through_both_formats() {
        let rows = vec![
            Row {
                ffs: "jffs2".into(),
                codec: "deflate".into(),
                axis_value: Some(250),
                step: "find".into(),
                duration_us: 10,
                reads: 1,
                writes: 2,
                erases: 3,
                meta_ram_bytes: 4,
                image_bytes: 5,
            },
            Row {
                axis_value: None,
                ..Row::default_for_test()
            },
        ];
        for f in [Format::Csv, Format::Json] {
            let text = String::from_utf8(emit_rows(&rows, f)).unwrap();
            assert_eq!(parse_rows(&text).unwrap(), rows);
        }
        assert!(parse_rows("nonsense").is_err());
    }

    impl Row {
        fn default_for_test() -> Self {
            Row {
                ffs: "ubifs".into(),
                codec: "lzfast".into(),
                axis_value: None,
                step: "mount".into(),
                duration_us: 0,
                reads: 0,
                writes: 0,
                erases: 0,
                meta_ram_bytes: 0,
                image_bytes: 0,
            }
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(emit(&[], Format::Csv), format!("{CSV_HEADER}\n").into_bytes());
        assert_eq!(emit(&[], Format::Json), b"[]\n".to_vec());
    }

    #[test]
    fn s2_file_count_mapping() {
        let mut cfg = ScenarioConfig::new(FsKind::Jffs2);
        for (count, per_dir) in [(250, 4), (500, 8), (1000, 16), (2000, 32)] {
            cfg.file_count = count;
            assert_eq!(cfg.s2_tree().files_per_dir, crate::treegen::Distribution::Constant(per_dir));
        }
    }

    #[test]
    fn oversized_partition_is_config_error() {
        let mut cfg = ScenarioConfig::new(FsKind::Ubifs);
        cfg.partition_mb = 4096;
        let (r, e) = run_s2(&cfg).unwrap_err();
        assert!(matches!(e, FsError::Config(_)));
        assert!(r.steps.is_empty());
    }
}
