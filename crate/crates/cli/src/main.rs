use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ffs_arena::bench::{self, BenchReport, Format, Scenario, ScenarioConfig, SweepAxis};
use ffs_arena::treegen::{self, TreeSpec};
use ffs_arena::volume::{self, VolumeOptions};
use ffs_arena::{Codec, FlashChip, FlashGeometry, FsError, FsKind, Partition, Vfs};

#[derive(Parser)]
#[command(name = "ffs-arena", version, about = "Flash file system benchmark on a simulated NAND chip")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Format a partition, optionally populate it, and save the chip image.
    Mkfs(MkfsArgs),
    /// Run scenario s1 or s2.
    Run(RunArgs),
    /// Run s2 once per value of a parameter.
    Sweep(SweepArgs),
    /// Summarize previously emitted CSV or JSON rows.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// jffs2, yaffs2, ubifs, or a comma list; `all` runs every file system.
    #[arg(long, default_value = "all", value_parser = parse_kinds)]
    ffs: Kinds,
    /// none, deflate or lzfast; defaults to each file system's own choice.
    #[arg(long, value_parser = parse_codec)]
    codec: Option<Codec>,
    #[arg(long, default_value_t = 100)]
    partition_mb: u64,
    /// Tree description file replacing the scenario's built-in tree.
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Output {
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: Format,
    /// Also record host time per step.
    #[arg(long)]
    wallclock: bool,
}

#[derive(Args)]
struct MkfsArgs {
    #[arg(long, value_parser = parse_kind)]
    ffs: FsKind,
    #[arg(long, value_parser = parse_codec)]
    codec: Option<Codec>,
    #[arg(long, default_value_t = 100)]
    partition_mb: u64,
    /// Populate the new file system with this tree.
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Chip image to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(value_parser = parse_scenario)]
    scenario: Scenario,
    #[command(flatten)]
    common: Common,
    /// Files in the s2 tree.
    #[arg(long, default_value_t = 1000)]
    files: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SweepArgs {
    /// file_count or partition_size.
    #[arg(long, default_value = "file_count", value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
    values: Vec<u64>,
    #[command(flatten)]
    common: Common,
    /// Files in the s2 tree when sweeping the partition size.
    #[arg(long, default_value_t = 1000)]
    files: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ReportArgs {
    /// Row files written by `run` or `sweep`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn parse_kind(s: &str) -> Result<FsKind, String> {
    FsKind::parse(s).map_err(|e| e.to_string())
}

/// File systems selected with `--ffs`, in command-line order.
#[derive(Clone)]
struct Kinds(Vec<FsKind>);

fn parse_kinds(s: &str) -> Result<Kinds, String> {
    if s == "all" {
        return Ok(Kinds(FsKind::ALL.to_vec()));
    }
    let mut out: Vec<FsKind> = Vec::new();
    for k in s.split(',') {
        let k = parse_kind(k.trim())?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(Kinds(out))
}

fn parse_codec(s: &str) -> Result<Codec, String> {
    Codec::parse(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> Result<Format, String> {
    Format::parse(s).map_err(|e| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    SweepAxis::parse(s).map_err(|e| e.to_string())
}

/// Failure classes mapped to exit codes.
enum Failure {
    Scenario(String),
    Config(String),
}

impl From<FsError> for Failure {
    fn from(e: FsError) -> Self {
        match e {
            FsError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Scenario(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Scenario(e.to_string())
    }
}

fn read_tree(path: &Path) -> Result<TreeSpec, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    TreeSpec::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn configs(common: &Common, files: u64, wallclock: bool) -> Result<Vec<ScenarioConfig>, Failure> {
    let tree = common.tree.as_deref().map(read_tree).transpose()?;
    Ok(common
        .ffs
        .0
        .iter()
        .copied()
        .map(|kind| ScenarioConfig {
            ffs: kind,
            codec: common.codec,
            partition_mb: common.partition_mb,
            tree: tree.clone(),
            seed: common.seed,
            file_count: files,
            wallclock,
        })
        .collect())
}

fn write_out(out: &Option<PathBuf>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn mkfs(a: MkfsArgs) -> Result<(), Failure> {
    let g = FlashGeometry::default();
    let blocks = g.blocks_for_mib(a.partition_mb);
    if a.partition_mb == 0 || blocks > g.blocks_per_chip {
        return Err(Failure::Config(format!(
            "{} MB partition does not fit the chip",
            a.partition_mb
        )));
    }
    let tree = a.tree.as_deref().map(read_tree).transpose()?;
    let chip = FlashChip::new(g).map_err(FsError::from)?;
    let mut opts = VolumeOptions::new(a.ffs).with_seed(a.seed);
    opts.codec = a.codec;
    let fs = volume::mkfs(chip, Partition::new(0, blocks), &opts)?;
    let mut vfs = Vfs::new(fs);
    vfs.mount()?;
    if let Some(spec) = tree {
        let g = treegen::generate(&spec, &mut vfs, "/")?;
        if g.incomplete {
            return Err(FsError::NoSpace.into());
        }
        eprintln!("populated {} dirs, {} files, {} bytes", g.manifest.dirs, g.manifest.files, g.manifest.bytes);
    }
    vfs.unmount()?;
    let chip = vfs.into_fs().into_chip();
    let file = fs::File::create(&a.out)?;
    chip.save_image(io::BufWriter::new(file))?;
    eprintln!(
        "{} on {} blocks, {} us virtual time, image {}",
        a.ffs.name(),
        blocks,
        chip.elapsed(),
        a.out.display()
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let cfgs = configs(&a.common, a.files, a.output.wallclock)?;
    let mut reports: Vec<BenchReport> = Vec::new();
    let mut failure = None;
    for cfg in &cfgs {
        match bench::run(a.scenario, cfg) {
            Ok(r) => reports.push(r),
            Err((r, e)) => {
                reports.push(r);
                failure = Some(Failure::from(e));
                break;
            }
        }
    }
    write_out(&a.output.out, &bench::emit(&reports, a.output.format))?;
    failure.map_or(Ok(()), Err)
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfgs = configs(&a.common, a.files, a.output.wallclock)?;
    let mut reports = Vec::new();
    let mut failure = None;
    for cfg in &cfgs {
        match bench::sweep(cfg, a.axis, &a.values) {
            Ok(s) => reports.extend(s.reports),
            Err((partial, e)) => {
                reports.extend(partial);
                failure = Some(Failure::from(e));
                break;
            }
        }
    }
    write_out(&a.output.out, &bench::emit(&reports, a.output.format))?;
    if failure.is_none() {
        let mut err = io::stderr().lock();
        for f in bench::fit_steps(&reports) {
            writeln!(err, "{:<7} {:<12} slope {:>12.3} us/unit  R2 {:.4}", f.ffs.name(), f.step, f.fit.slope, f.fit.r2)?;
        }
    }
    failure.map_or(Ok(()), Err)
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        rows.extend(bench::parse_rows(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?);
    }
    let mut out = io::stdout().lock();
    writeln!(out, "{:<7} {:<8} {:>8} {:<12} {:>12} {:>8} {:>8} {:>7}", "ffs", "codec", "axis", "step", "duration_us", "reads", "writes", "erases")?;
    for r in &rows {
        let axis = r.axis_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<7} {:<8} {:>8} {:<12} {:>12} {:>8} {:>8} {:>7}",
            r.ffs, r.codec, axis, r.step, r.duration_us, r.reads, r.writes, r.erases
        )?;
    }
    let fits: Vec<_> = bench::fit_rows(&rows).into_iter().filter(|f| f.2 > 1).collect();
    if !fits.is_empty() {
        writeln!(out)?;
        writeln!(out, "{:<7} {:<12} {:>6} {:>14} {:>8}", "ffs", "step", "points", "slope", "R2")?;
        for (ffs, step, n, fit) in fits {
            writeln!(out, "{ffs:<7} {step:<12} {n:>6} {:>14.3} {:>8.4}", fit.slope, fit.r2)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Mkfs(a) => mkfs(a),
        Cmd::Run(a) => run(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
