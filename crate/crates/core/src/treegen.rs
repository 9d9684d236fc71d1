//! Parametric file-tree generator.
//!
//! A [`TreeSpec`] describes files per directory, subdirectories per
//! directory, file size and depth as distributions. Every directory draws
//! from its own RNG seeded by (seed, path), so a subtree comes out the same
//! no matter the order in which it is visited.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FsError, FsResult};
use crate::vfs::{join, FileKind, Vfs};

/// Name searched for by the not-found scenario; never generated.
pub const MISSING_NAME: &str = "missing.target";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Constant(u64),
    Uniform(u64, u64),
    Normal(f64, f64),
}

impl Distribution {
    pub fn validate(&self) -> FsResult<()> {
        match *self {
            Distribution::Uniform(lo, hi) if hi < lo => Err(FsError::Config(format!(
                "uniform({lo},{hi}): upper bound below lower bound"
            ))),
            Distribution::Normal(m, s) if s < 0.0 || !s.is_finite() || !m.is_finite() => Err(
                FsError::Config(format!("norm({m},{s}): invalid standard deviation")),
            ),
            _ => Ok(()),
        }
    }

    /// Draws an integer, rounded and clamped at zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            Distribution::Constant(v) => v,
            Distribution::Uniform(lo, hi) => rng.random_range(lo..=hi),
            Distribution::Normal(m, s) => {
                let x = if s == 0.0 {
                    m
                } else {
                    Normal::new(m, s).expect("validated").sample(rng)
                };
                x.round().max(0.0) as u64
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Constant(v) => v as f64,
            Distribution::Uniform(lo, hi) => (lo + hi) as f64 / 2.0,
            Distribution::Normal(m, _) => m,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Constant(v) => write!(f, "const({v})"),
            Distribution::Uniform(lo, hi) => write!(f, "uniform({lo},{hi})"),
            Distribution::Normal(m, s) => write!(f, "norm({m},{s})"),
        }
    }
}

impl FromStr for Distribution {
    type Err = FsError;

    fn from_str(s: &str) -> FsResult<Self> {
        let bad = || FsError::Config(format!("bad distribution `{s}`"));
        let s = s.trim();
        if let Ok(v) = s.parse::<u64>() {
            return Ok(Distribution::Constant(v));
        }
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = s[..open].trim();
        let args: Vec<&str> = s[open + 1..s.len() - 1].split(',').map(str::trim).collect();
        let int = |a: &str| a.parse::<u64>().map_err(|_| bad());
        let float = |a: &str| a.parse::<f64>().map_err(|_| bad());
        let d = match (name, args.as_slice()) {
            ("const", [v]) => Distribution::Constant(int(v)?),
            ("uniform", [lo, hi]) => Distribution::Uniform(int(lo)?, int(hi)?),
            ("norm", [m, sd]) => Distribution::Normal(float(m)?, float(sd)?),
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub files_per_dir: Distribution,
    pub dirs_per_dir: Distribution,
    pub file_size: Distribution,
    pub depth: u32,
    pub seed: u64,
    pub compressibility: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self::s1(0)
    }
}

impl TreeSpec {
    /// Tree created by the first scenario.
    pub fn s1(seed: u64) -> Self {
        Self {
            files_per_dir: Distribution::Normal(4.0, 1.0),
            dirs_per_dir: Distribution::Normal(3.0, 1.0),
            file_size: Distribution::Normal(1024.0, 64.0),
            depth: 5,
            seed,
            compressibility: 0.5,
        }
    }

    /// Tree created by the second scenario: binary, 750-byte files.
    pub fn s2(files_per_dir: u64, seed: u64) -> Self {
        Self {
            files_per_dir: Distribution::Constant(files_per_dir),
            dirs_per_dir: Distribution::Constant(2),
            file_size: Distribution::Constant(750),
            depth: 5,
            seed,
            compressibility: 0.5,
        }
    }

    pub fn validate(&self) -> FsResult<()> {
        self.files_per_dir.validate()?;
        self.dirs_per_dir.validate()?;
        self.file_size.validate()?;
        if !(0.0..=1.0).contains(&self.compressibility) {
            return Err(FsError::Config(format!(
                "compressibility {} outside [0,1]",
                self.compressibility
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> FsResult<Self> {
        let mut spec = TreeSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| FsError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |what: &str| FsError::Config(format!("line {}: bad {what} `{v}`", n + 1));
            match k {
                "depth" => spec.depth = v.parse().map_err(|_| num("depth"))?,
                "seed" => spec.seed = v.parse().map_err(|_| num("seed"))?,
                "compressibility" => {
                    spec.compressibility = v.parse().map_err(|_| num("compressibility"))?
                }
                "files_per_dir" => spec.files_per_dir = v.parse()?,
                "dirs_per_dir" => spec.dirs_per_dir = v.parse()?,
                "file_size" => spec.file_size = v.parse()?,
                other => {
                    return Err(FsError::Config(format!(
                        "line {}: unknown key `{other}`",
                        n + 1
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        format!(
            "depth = {}\nfiles_per_dir = {}\ndirs_per_dir = {}\nfile_size = {}\nseed = {}\ncompressibility = {}\n",
            self.depth,
            self.files_per_dir,
            self.dirs_per_dir,
            self.file_size,
            self.seed,
            self.compressibility
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: FileKind,
    pub size: u64,
    pub content_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeManifest {
    pub root: String,
    pub compressibility_pct: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directories including the root.
    pub dirs: u64,
    pub files: u64,
    pub bytes: u64,
}

impl TreeManifest {
    pub fn new(root: &str, compressibility: f64) -> Self {
        Self {
            root: root.to_string(),
            compressibility_pct: (compressibility * 100.0).round() as u32,
            dirs: 1,
            ..Default::default()
        }
    }

    pub fn push(&mut self, e: ManifestEntry) {
        match e.kind {
            FileKind::Dir => self.dirs += 1,
            FileKind::File => {
                self.files += 1;
                self.bytes += e.size;
            }
        }
        self.entries.push(e);
    }

    pub fn compressibility(&self) -> f64 {
        self.compressibility_pct as f64 / 100.0
    }

    pub fn file_paths(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| e.kind == FileKind::File)
            .map(|e| e.path.as_str())
    }

    /// Directories below the root, deepest first.
    pub fn dirs_bottom_up(&self) -> Vec<&str> {
        let mut d: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| e.kind == FileKind::Dir)
            .map(|e| e.path.as_str())
            .collect();
        d.sort_by_key(|p| std::cmp::Reverse(p.matches('/').count()));
        d
    }
}

/// Stable 64-bit hash of (seed, text).
pub fn seed_for(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn name(prefix: char, i: u64) -> String {
    format!("{prefix}{i:03}")
}

/// Computes the manifest without touching any volume.
pub fn plan(spec: &TreeSpec, root: &str) -> FsResult<TreeManifest> {
    spec.validate()?;
    let mut m = TreeManifest::new(root, spec.compressibility);
    plan_dir(spec, root, 0, &mut m);
    Ok(m)
}

fn plan_dir(spec: &TreeSpec, dir: &str, level: u32, m: &mut TreeManifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, dir));
    let ndirs = if level < spec.depth {
        spec.dirs_per_dir.sample(&mut rng)
    } else {
        0
    };
    let nfiles = spec.files_per_dir.sample(&mut rng);
    let mut subdirs = Vec::with_capacity(ndirs as usize);
    for i in 0..ndirs {
        let path = join(dir, &name('d', i));
        m.push(ManifestEntry {
            path: path.clone(),
            kind: FileKind::Dir,
            size: 0,
            content_seed: 0,
        });
        subdirs.push(path);
    }
    for i in 0..nfiles {
        let size = spec.file_size.sample(&mut rng);
        m.push(ManifestEntry {
            path: join(dir, &name('f', i)),
            kind: FileKind::File,
            size,
            content_seed: rng.next_u64(),
        });
    }
    for d in subdirs {
        plan_dir(spec, &d, level + 1, m);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub manifest: TreeManifest,
    /// Set when the volume ran out of space; the manifest lists what was
    /// actually created.
    pub incomplete: bool,
}

/// Creates every manifest entry on the volume, in order.
pub fn apply(manifest: &TreeManifest, vfs: &mut Vfs) -> FsResult<Generated> {
    let mut done = TreeManifest::new(&manifest.root, manifest.compressibility());
    for e in &manifest.entries {
        let r = match e.kind {
            FileKind::Dir => vfs.mkdir(&e.path).map(|_| ()),
            FileKind::File => vfs.create_file(&e.path).and_then(|_| {
                if e.size == 0 {
                    return Ok(());
                }
                let data = gen_content(e.content_seed, e.size as usize, manifest.compressibility());
                vfs.write_file(&e.path, 0, &data)
            }),
        };
        match r {
            Ok(()) => done.push(e.clone()),
            Err(FsError::NoSpace) => {
                return Ok(Generated {
                    manifest: done,
                    incomplete: true,
                })
            }
            Err(err) => return Err(err),
        }
    }
    Ok(Generated {
        manifest: done,
        incomplete: false,
    })
}

pub fn generate(spec: &TreeSpec, vfs: &mut Vfs, root: &str) -> FsResult<Generated> {
    let attr = vfs.stat(root)?;
    if attr.kind != FileKind::Dir {
        return Err(FsError::NotADirectory(root.to_string()));
    }
    let m = plan(spec, root)?;
    apply(&m, vfs)
}

const WORDS: [&str; 32] = [
    "flash", "block", "page", "erase", "write", "read", "node", "chunk", "inode", "dirent",
    "mount", "scan", "index", "tree", "journal", "commit", "garbage", "collect", "wear", "level",
    "volume", "device", "buffer", "cache", "kernel", "driver", "memory", "storage", "system",
    "board", "module", "config",
];

const SEGMENT: usize = 256;

/// Deterministic file body. A `compressibility` share of the 256-byte
/// segments is word text, the rest random bytes.
pub fn gen_content(content_seed: u64, size: usize, compressibility: f64) -> Vec<u8> {
    let c = compressibility.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let mut out = Vec::with_capacity(size);
    let mut seg = 0u64;
    while out.len() < size {
        let n = SEGMENT.min(size - out.len());
        let text = ((seg + 1) as f64 * c).floor() > (seg as f64 * c).floor();
        if text {
            let start = out.len();
            while out.len() < start + n {
                let w = WORDS[rng.random_range(0..WORDS.len())];
                out.extend_from_slice(w.as_bytes());
                out.push(b' ');
            }
            out.truncate(start + n);
        } else {
            let start = out.len();
            out.resize(start + n, 0);
            rng.fill_bytes(&mut out[start..]);
        }
        seg += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;

    #[test]
    fn binary_tree_counts() {
        let m = plan(
            &TreeSpec {
                files_per_dir: Distribution::Constant(3),
                dirs_per_dir: Distribution::Constant(2),
                file_size: Distribution::Constant(10),
                depth: 5,
                seed: 1,
                compressibility: 0.5,
            },
            "/",
        )
        .unwrap();
        assert_eq!(m.dirs, 63);
        assert_eq!(m.files, 189);
        assert_eq!(m.bytes, 1890);
    }

    #[test]
    fn depth_zero_is_flat() {
        let mut spec = TreeSpec::s2(7, 3);
        spec.depth = 0;
        let m = plan(&spec, "/t").unwrap();
        assert_eq!((m.dirs, m.files), (1, 7));
        assert!(m.entries.iter().all(|e| e.path.starts_with("/t/f")));
    }

    #[test]
    fn parents_precede_children() {
        let m = plan(&TreeSpec::s1(9), "/").unwrap();
        let mut seen = std::collections::HashSet::new();
        seen.insert("/".to_string());
        for e in &m.entries {
            assert!(seen.contains(&crate::vfs::parent_of(&e.path)), "{}", e.path);
            assert!(seen.insert(e.path.clone()));
        }
        assert!(m.entries.iter().all(|e| !e.path.ends_with(MISSING_NAME)));
    }

    #[test]
    fn same_seed_same_manifest() {
        let a = plan(&TreeSpec::s1(5), "/").unwrap();
        let b = plan(&TreeSpec::s1(5), "/").unwrap();
        let c = plan(&TreeSpec::s1(6), "/").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_sample_mean() {
        let d = Distribution::Normal(4.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let sum: u64 = (0..n).map(|_| d.sample(&mut rng)).sum();
        let mean = sum as f64 / n as f64;
        assert!((3.9..=4.1).contains(&mean), "{mean}");
        let wide = Distribution::Normal(0.5, 10.0);
        // u64 cannot be negative; check the clamp actually produced zeros.
        assert!((0..1000).any(|_| wide.sample(&mut rng) == 0));
    }

    #[test]
    fn distribution_text() {
        for s in ["const(2)", "uniform(1,5)", "norm(4,1)", "norm(1024,64)"] {
            let d: Distribution = s.parse().unwrap();
            assert_eq!(d.to_string().parse::<Distribution>().unwrap(), d);
        }
        assert_eq!("7".parse::<Distribution>().unwrap(), Distribution::Constant(7));
        assert!("uniform(5,1)".parse::<Distribution>().is_err());
        assert!("norm(1,-1)".parse::<Distribution>().is_err());
        assert!("gamma(1)".parse::<Distribution>().is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = TreeSpec::s1(77);
        assert_eq!(TreeSpec::parse(&spec.to_text()).unwrap(), spec);
        let parsed = TreeSpec::parse("# s2\ndepth = 5\nfiles_per_dir = const(4)\ndirs_per_dir: const(2)\nfile_size = 750\n").unwrap();
        assert_eq!(parsed.file_size, Distribution::Constant(750));
        assert!(TreeSpec::parse("colour = blue").is_err());
        assert!(TreeSpec::parse("compressibility = 1.5").is_err());
    }

    #[test]
    fn content_compressibility_bounds() {
        let ratio = |c: f64| {
            let data = gen_content(11, 64 * 1024, c);
            Codec::Deflate.compress(&data).1.len() as f64 / data.len() as f64
        };
        assert!(ratio(0.0) >= 0.95);
        assert!(ratio(1.0) <= 0.3);
        let steps: Vec<f64> = (0..=10).map(|i| ratio(i as f64 / 10.0)).collect();
        assert!(steps.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{steps:?}");
        assert!(gen_content(1, 0, 0.5).is_empty());
        assert_eq!(gen_content(3, 1000, 0.5), gen_content(3, 1000, 0.5));
    }
}
