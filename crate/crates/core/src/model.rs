//! In-memory reference file system and a seeded random-operation driver that
//! checks a flash file system against it.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::FsError;
use crate::treegen::gen_content;
use crate::vfs::{join, parent_of, FileKind, FlashFs, Vfs};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Create(String),
    Write {
        path: String,
        offset: u64,
        len: usize,
        seed: u64,
    },
    Read(String),
    Delete(String),
    Mkdir(String),
    Rmdir(String),
    Readdir(String),
    Stat(String),
    Remount,
    Gc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrKind {
    NotFound,
    Exists,
    NotADirectory,
    IsADirectory,
    NotEmpty,
    NoSpace,
    InvalidPath,
    Other,
}

impl From<&FsError> for ErrKind {
    fn from(e: &FsError) -> Self {
        match e {
            FsError::NotFound(_) => ErrKind::NotFound,
            FsError::Exists(_) => ErrKind::Exists,
            FsError::NotADirectory(_) => ErrKind::NotADirectory,
            FsError::IsADirectory(_) => ErrKind::IsADirectory,
            FsError::NotEmpty(_) => ErrKind::NotEmpty,
            FsError::NoSpace => ErrKind::NoSpace,
            FsError::InvalidPath(_) => ErrKind::InvalidPath,
            _ => ErrKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Data(Vec<u8>),
    Names(Vec<(String, FileKind)>),
    Attr(FileKind, u64),
    Err(ErrKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RefNode {
    File(Vec<u8>),
    Dir,
}

/// Path-keyed reference file system.
#[derive(Debug, Clone)]
pub struct RefModel {
    nodes: BTreeMap<String, RefNode>,
}

impl Default for RefModel {
    fn default() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert("/".to_string(), RefNode::Dir);
        Self { nodes }
    }
}

impl RefModel {
    pub fn new() -> Self {
        Self::default()
    }

    fn parent_ok(&self, path: &str) -> Result<(), ErrKind> {
        // Walk down so a file in the middle reports NotADirectory.
        let mut cur = String::from("/");
        let parent = parent_of(path);
        for part in parent.split('/').filter(|p| !p.is_empty()) {
            cur = join(&cur, part);
            match self.nodes.get(&cur) {
                None => return Err(ErrKind::NotFound),
                Some(RefNode::File(_)) => return Err(ErrKind::NotADirectory),
                Some(RefNode::Dir) => {}
            }
        }
        Ok(())
    }

    fn get(&self, path: &str) -> Result<&RefNode, ErrKind> {
        if path != "/" {
            self.parent_ok(path)?;
        }
        self.nodes.get(path).ok_or(ErrKind::NotFound)
    }

    fn children(&self, dir: &str) -> Vec<(String, FileKind)> {
        let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
        self.nodes
            .range(prefix.clone()..)
            .take_while(|(p, _)| p.starts_with(&prefix))
            .filter(|(p, _)| p.len() > prefix.len() && !p[prefix.len()..].contains('/'))
            .map(|(p, n)| {
                let kind = match n {
                    RefNode::File(_) => FileKind::File,
                    RefNode::Dir => FileKind::Dir,
                };
                (p[prefix.len()..].to_string(), kind)
            })
            .collect()
    }

    pub fn files(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, n)| matches!(n, RefNode::File(_)))
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn dirs(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, n)| **n == RefNode::Dir)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.nodes
            .values()
            .map(|n| match n {
                RefNode::File(d) => d.len() as u64,
                RefNode::Dir => 0,
            })
            .sum()
    }

    fn create(&mut self, path: &str, node: RefNode) -> Outcome {
        if let Err(e) = self.parent_ok(path) {
            return Outcome::Err(e);
        }
        if self.nodes.contains_key(path) {
            return Outcome::Err(ErrKind::Exists);
        }
        self.nodes.insert(path.to_string(), node);
        Outcome::Done
    }

    pub fn apply(&mut self, op: &Op) -> Outcome {
        if let Op::Create(p) | Op::Mkdir(p) | Op::Delete(p) | Op::Rmdir(p) = op {
            if p == "/" {
                return Outcome::Err(ErrKind::InvalidPath);
            }
        }
        match op {
            Op::Create(p) => self.create(p, RefNode::File(Vec::new())),
            Op::Mkdir(p) => self.create(p, RefNode::Dir),
            Op::Write {
                path,
                offset,
                len,
                seed,
            } => match self.get(path) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::Dir) => Outcome::Err(ErrKind::IsADirectory),
                Ok(RefNode::File(_)) => {
                    if *len == 0 {
                        return Outcome::Done;
                    }
                    let data = gen_content(*seed, *len, 0.5);
                    let Some(RefNode::File(buf)) = self.nodes.get_mut(path) else {
                        unreachable!()
                    };
                    let end = *offset as usize + data.len();
                    if buf.len() < end {
                        buf.resize(end, 0);
                    }
                    buf[*offset as usize..end].copy_from_slice(&data);
                    Outcome::Done
                }
            },
            Op::Read(p) => match self.get(p) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::Dir) => Outcome::Err(ErrKind::IsADirectory),
                Ok(RefNode::File(d)) => Outcome::Data(d.clone()),
            },
            Op::Delete(p) => match self.get(p) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::Dir) => Outcome::Err(ErrKind::IsADirectory),
                Ok(RefNode::File(_)) => {
                    self.nodes.remove(p);
                    Outcome::Done
                }
            },
            Op::Rmdir(p) => match self.get(p) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::File(_)) => Outcome::Err(ErrKind::NotADirectory),
                Ok(RefNode::Dir) if !self.children(p).is_empty() => {
                    Outcome::Err(ErrKind::NotEmpty)
                }
                Ok(RefNode::Dir) => {
                    self.nodes.remove(p);
                    Outcome::Done
                }
            },
            Op::Readdir(p) => match self.get(p) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::File(_)) => Outcome::Err(ErrKind::NotADirectory),
                Ok(RefNode::Dir) => Outcome::Names(self.children(p)),
            },
            Op::Stat(p) => match self.get(p) {
                Err(e) => Outcome::Err(e),
                Ok(RefNode::File(d)) => Outcome::Attr(FileKind::File, d.len() as u64),
                Ok(RefNode::Dir) => Outcome::Attr(FileKind::Dir, 0),
            },
            Op::Remount | Op::Gc => Outcome::Done,
        }
    }
}

/// Applies one operation to the volume and reports it in model terms.
pub fn apply_fs(vfs: &mut Vfs, op: &Op) -> Outcome {
    fn done<T>(r: Result<T, FsError>) -> Outcome {
        match r {
            Ok(_) => Outcome::Done,
            Err(e) => Outcome::Err((&e).into()),
        }
    }
    match op {
        Op::Create(p) => done(vfs.create_file(p)),
        Op::Mkdir(p) => done(vfs.mkdir(p)),
        Op::Write {
            path,
            offset,
            len,
            seed,
        } => done(vfs.write_file(path, *offset, &gen_content(*seed, *len, 0.5))),
        Op::Read(p) => match vfs.read_file(p) {
            Ok(d) => Outcome::Data(d),
            Err(e) => Outcome::Err((&e).into()),
        },
        Op::Delete(p) => done(vfs.delete_file(p)),
        Op::Rmdir(p) => done(vfs.rmdir(p)),
        Op::Readdir(p) => match vfs.readdir(p) {
            Ok(mut l) => {
                l.sort_by(|a, b| a.name.cmp(&b.name));
                Outcome::Names(l.into_iter().map(|e| (e.name, e.kind)).collect())
            }
            Err(e) => Outcome::Err((&e).into()),
        },
        Op::Stat(p) => match vfs.stat(p) {
            Ok(a) if a.kind == FileKind::Dir => Outcome::Attr(a.kind, 0),
            Ok(a) => Outcome::Attr(a.kind, a.size),
            Err(e) => Outcome::Err((&e).into()),
        },
        Op::Remount => done(vfs.unmount().and_then(|_| vfs.mount())),
        Op::Gc => match vfs.gc_step() {
            Ok(_) | Err(FsError::NothingToCollect) => Outcome::Done,
            Err(e) => Outcome::Err((&e).into()),
        },
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub ops: usize,
    pub remounts: usize,
    pub gc_every: usize,
    pub seed: u64,
    pub max_files: usize,
    pub max_write: usize,
    /// Writes turn into deletes once the model holds this many bytes.
    pub max_bytes: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ops: 10_000,
            remounts: 5,
            gc_every: 50,
            seed: 1,
            max_files: 300,
            max_write: 6000,
            max_bytes: 3 << 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelReport {
    pub ops: usize,
    pub remounts: usize,
    pub gc_calls: usize,
    pub errors_matched: usize,
    pub full_checks: usize,
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub step: usize,
    pub op: Op,
    pub expected: Outcome,
    pub actual: Outcome,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = |o: &Outcome| match o {
            Outcome::Data(d) => format!("Data({} bytes)", d.len()),
            other => format!("{other:?}"),
        };
        write!(
            f,
            "step {}: {:?}: expected {}, got {}",
            self.step,
            self.op,
            short(&self.expected),
            short(&self.actual)
        )
    }
}

/// Seeded operation generator that consults the model for plausible paths.
pub struct OpGen {
    rng: ChaCha8Rng,
    cfg: ModelConfig,
}

impl OpGen {
    pub fn new(cfg: ModelConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        }
    }

    fn pick<'a>(&mut self, v: &[&'a str]) -> Option<&'a str> {
        if v.is_empty() {
            None
        } else {
            Some(v[self.rng.random_range(0..v.len())])
        }
    }

    fn fresh_name(&mut self, model: &RefModel) -> String {
        let dirs = model.dirs();
        let dir = self.pick(&dirs).unwrap_or("/");
        let name = format!("n{}", self.rng.random_range(0..40));
        join(dir, &name)
    }

    fn any_path(&mut self, model: &RefModel) -> String {
        let files = model.files();
        let dirs = model.dirs();
        match self.rng.random_range(0..10) {
            0..=5 => self.pick(&files).map(str::to_string),
            6..=7 => self.pick(&dirs).map(str::to_string),
            _ => None,
        }
        .unwrap_or_else(|| self.fresh_name(model))
    }

    pub fn next(&mut self, model: &RefModel) -> Op {
        let files = model.files();
        let full = files.len() >= self.cfg.max_files || model.total_bytes() >= self.cfg.max_bytes;
        let roll = self.rng.random_range(0..100);
        match roll {
            0..=19 if !full => Op::Create(self.fresh_name(model)),
            0..=19 | 45..=54 => Op::Delete(self.any_path(model)),
            20..=44 => {
                if full {
                    return Op::Delete(self.any_path(model));
                }
                let path = self.any_path(model);
                let size = match model.nodes.get(&path) {
                    Some(RefNode::File(d)) => d.len() as u64,
                    _ => 0,
                };
                let offset = match self.rng.random_range(0..10) {
                    0..=5 => size,
                    6..=8 => self.rng.random_range(0..=size),
                    _ => size + self.rng.random_range(0..3000),
                };
                let len = if self.rng.random_bool(0.7) {
                    self.rng.random_range(0..=1024)
                } else {
                    self.rng.random_range(0..=self.cfg.max_write)
                };
                Op::Write {
                    path,
                    offset,
                    len,
                    seed: self.rng.random(),
                }
            }
            55..=69 => Op::Read(self.any_path(model)),
            70..=75 if !full => Op::Mkdir(self.fresh_name(model)),
            70..=79 => {
                let dirs = model.dirs();
                let p = self
                    .pick(&dirs)
                    .filter(|d| *d != "/")
                    .map(str::to_string)
                    .unwrap_or_else(|| self.any_path(model));
                Op::Rmdir(p)
            }
            80..=89 => {
                let dirs = model.dirs();
                let p = if self.rng.random_bool(0.9) {
                    self.pick(&dirs).unwrap_or("/").to_string()
                } else {
                    self.any_path(model)
                };
                Op::Readdir(p)
            }
            _ => Op::Stat(self.any_path(model)),
        }
    }
}

/// Compares every path and every file body.
pub fn full_check(vfs: &mut Vfs, model: &RefModel, step: usize) -> Result<(), Mismatch> {
    for (path, node) in &model.nodes {
        let ops = match node {
            RefNode::Dir => vec![Op::Readdir(path.clone()), Op::Stat(path.clone())],
            RefNode::File(_) => vec![Op::Read(path.clone()), Op::Stat(path.clone())],
        };
        let mut m = model.clone();
        for op in ops {
            let expected = m.apply(&op);
            let actual = apply_fs(vfs, &op);
            if expected != actual {
                return Err(Mismatch {
                    step,
                    op,
                    expected,
                    actual,
                });
            }
        }
    }
    Ok(())
}

/// Drives `ops` random operations against the volume (which must be
/// formatted and unmounted) and the reference model in lockstep.
pub fn run_model(fs: Box<dyn FlashFs>, cfg: ModelConfig) -> (Result<ModelReport, Mismatch>, Vfs) {
    let mut vfs = Vfs::new(fs);
    let r = drive(&mut vfs, cfg);
    (r, vfs)
}

fn drive(vfs: &mut Vfs, cfg: ModelConfig) -> Result<ModelReport, Mismatch> {
    let mut model = RefModel::new();
    let mut gen = OpGen::new(cfg);
    let mut report = ModelReport::default();
    let check = |step, op: Op, expected: Outcome, actual: Outcome| {
        if expected == actual {
            Ok(())
        } else {
            Err(Mismatch {
                step,
                op,
                expected,
                actual,
            })
        }
    };
    let mount = Op::Remount;
    if let Err(e) = vfs.mount() {
        return Err(Mismatch {
            step: 0,
            op: mount,
            expected: Outcome::Done,
            actual: Outcome::Err((&e).into()),
        });
    }
    let remount_every = cfg.ops / (cfg.remounts + 1);
    for step in 1..=cfg.ops {
        let op = gen.next(&model);
        let expected = model.apply(&op);
        let actual = apply_fs(vfs, &op);
        if matches!(expected, Outcome::Err(_)) && expected == actual {
            report.errors_matched += 1;
        }
        check(step, op, expected, actual)?;
        report.ops += 1;
        if cfg.gc_every > 0 && step % cfg.gc_every == 0 {
            check(step, Op::Gc, Outcome::Done, apply_fs(vfs, &Op::Gc))?;
            report.gc_calls += 1;
        }
        if remount_every > 0 && step % remount_every == 0 && report.remounts < cfg.remounts {
            check(step, Op::Remount, Outcome::Done, apply_fs(vfs, &Op::Remount))?;
            report.remounts += 1;
            full_check(vfs, &model, step)?;
            report.full_checks += 1;
        }
    }
    full_check(vfs, &model, cfg.ops)?;
    report.full_checks += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_semantics() {
        let mut m = RefModel::new();
        assert_eq!(m.apply(&Op::Mkdir("/d".into())), Outcome::Done);
        assert_eq!(m.apply(&Op::Mkdir("/d".into())), Outcome::Err(ErrKind::Exists));
        assert_eq!(m.apply(&Op::Create("/d/f".into())), Outcome::Done);
        assert_eq!(m.apply(&Op::Create("/x/f".into())), Outcome::Err(ErrKind::NotFound));
        assert_eq!(m.apply(&Op::Create("/d/f/g".into())), Outcome::Err(ErrKind::NotADirectory));
        assert_eq!(m.apply(&Op::Rmdir("/d".into())), Outcome::Err(ErrKind::NotEmpty));
        let w = Op::Write {
            path: "/d/f".into(),
            offset: 10,
            len: 5,
            seed: 1,
        };
        assert_eq!(m.apply(&w), Outcome::Done);
        assert_eq!(m.apply(&Op::Stat("/d/f".into())), Outcome::Attr(FileKind::File, 15));
        let Outcome::Data(d) = m.apply(&Op::Read("/d/f".into())) else {
            panic!()
        };
        assert_eq!(&d[..10], &[0; 10]);
        assert_eq!(
            m.apply(&Op::Readdir("/".into())),
            Outcome::Names(vec![("d".into(), FileKind::Dir)])
        );
        assert_eq!(m.apply(&Op::Delete("/d".into())), Outcome::Err(ErrKind::IsADirectory));
        assert_eq!(m.apply(&Op::Delete("/d/f".into())), Outcome::Done);
        assert_eq!(m.apply(&Op::Rmdir("/d".into())), Outcome::Done);
        assert_eq!(m.files().len() + m.dirs().len(), 1);
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = ModelConfig::default();
        let run = || {
            let mut m = RefModel::new();
            let mut g = OpGen::new(cfg);
            (0..500)
                .map(|_| {
                    let op = g.next(&m);
                    m.apply(&op);
                    op
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
