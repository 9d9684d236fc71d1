//! The contract every flash file system model implements, plus the VFS-like
//! metadata cache that sits above it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, Partition};

pub type InodeId = u64;

pub const ROOT_INODE: InodeId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum FileKind {
    File,
    Dir,
}

impl FileKind {
    pub fn code(self) -> u8 {
        match self {
            FileKind::File => 1,
            FileKind::Dir => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(FileKind::File),
            2 => Some(FileKind::Dir),
            _ => None,
        }
    }
}

/// Attributes returned by `stat`. Directories report size 0; their entry
/// count comes from `readdir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAttr {
    pub kind: FileKind,
    pub size: u64,
    pub inode: InodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub kind: FileKind,
    pub inode: InodeId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GcProgress {
    pub victim: u32,
    pub copied: u32,
    pub erased: u32,
    /// The victim was picked from the clean list (wear leveling).
    pub clean_pick: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum FsKind {
    Jffs2,
    Yaffs2,
    Ubifs,
}

impl FsKind {
    pub const ALL: [FsKind; 3] = [FsKind::Jffs2, FsKind::Yaffs2, FsKind::Ubifs];

    pub fn name(self) -> &'static str {
        match self {
            FsKind::Jffs2 => "jffs2",
            FsKind::Yaffs2 => "yaffs2",
            FsKind::Ubifs => "ubifs",
        }
    }

    pub fn parse(s: &str) -> FsResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jffs2" => Ok(FsKind::Jffs2),
            "yaffs2" | "yaffs" => Ok(FsKind::Yaffs2),
            "ubifs" => Ok(FsKind::Ubifs),
            other => Err(FsError::Config(format!("unknown file system {other:?}"))),
        }
    }
}

/// Uniform file system contract. Paths are absolute, `/`-separated, without
/// `.` or `..` components.
pub trait FlashFs {
    fn kind(&self) -> FsKind;
    fn mount(&mut self) -> FsResult<()>;
    fn unmount(&mut self) -> FsResult<()>;
    fn is_mounted(&self) -> bool;

    fn create_file(&mut self, path: &str) -> FsResult<InodeId>;
    /// Writes at `offset`, extending the file (zero-filling any hole).
    fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> FsResult<()>;
    fn read_file(&mut self, path: &str) -> FsResult<Vec<u8>>;
    fn delete_file(&mut self, path: &str) -> FsResult<()>;
    fn mkdir(&mut self, path: &str) -> FsResult<InodeId>;
    fn rmdir(&mut self, path: &str) -> FsResult<()>;
    fn readdir(&mut self, path: &str) -> FsResult<Vec<DirEntry>>;
    fn stat(&mut self, path: &str) -> FsResult<FileAttr>;

    fn lookup(&mut self, path: &str) -> FsResult<InodeId> {
        self.stat(path).map(|a| a.inode)
    }

    /// One unit of garbage collection work, forced by the caller.
    fn gc_step(&mut self) -> FsResult<GcProgress>;

    /// Virtual time of the last mount split into (lower layer, file system),
    /// for stacks that attach a volume layer first.
    fn mount_breakdown(&self) -> Option<(u64, u64)> {
        None
    }

    /// Resident metadata footprint.
    fn meta_ram_bytes(&self) -> u64;
    /// Live on-flash footprint.
    fn used_flash_bytes(&self) -> u64;
    /// Payload bytes that can still be written, as a statfs-style estimate.
    fn free_bytes(&self) -> u64;

    fn chip(&self) -> &FlashChip;
    fn chip_mut(&mut self) -> &mut FlashChip;
    fn partition(&self) -> Partition;
    fn into_chip(self: Box<Self>) -> FlashChip;
}

/// Splits an absolute path into its components.
pub fn components(path: &str) -> FsResult<Vec<&str>> {
    if !path.starts_with('/') {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    let parts: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    for p in &parts {
        if *p == "." || *p == ".." || p.len() > 255 {
            return Err(FsError::InvalidPath(path.to_string()));
        }
    }
    Ok(parts)
}

/// Returns `(parent components, final name)`; fails on the root.
pub fn split_parent(path: &str) -> FsResult<(Vec<&str>, &str)> {
    let mut parts = components(path)?;
    let name = parts
        .pop()
        .ok_or_else(|| FsError::InvalidPath(path.to_string()))?;
    Ok((parts, name))
}

pub fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

pub fn parent_of(path: &str) -> String {
    match path.rfind('/') {
        Some(0) | None => "/".to_string(),
        Some(i) => path[..i].to_string(),
    }
}

#[derive(Debug, Clone)]
enum Cached {
    Attr(FileAttr),
    Listing(Vec<DirEntry>),
}

/// Bounded LRU map from path to attribute or directory listing.
#[derive(Debug, Clone)]
pub struct MetaCache {
    capacity: usize,
    entries: HashMap<(String, bool), (Cached, u64)>,
    order: BTreeMap<u64, (String, bool)>,
    tick: u64,
    pub hits: u64,
    pub misses: u64,
}

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

impl MetaCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&mut self, path: &str, listing: bool) -> Option<Cached> {
        let key = (path.to_string(), listing);
        match self.entries.get_mut(&key) {
            Some((value, stamp)) => {
                self.order.remove(stamp);
                self.tick += 1;
                *stamp = self.tick;
                self.order.insert(self.tick, key);
                self.hits += 1;
                Some(value.clone())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    fn put(&mut self, path: &str, listing: bool, value: Cached) {
        if self.capacity == 0 {
            return;
        }
        let key = (path.to_string(), listing);
        if let Some((_, stamp)) = self.entries.remove(&key) {
            self.order.remove(&stamp);
        }
        while self.entries.len() >= self.capacity {
            let (&oldest, _) = self.order.iter().next().expect("non-empty");
            let victim = self.order.remove(&oldest).unwrap();
            self.entries.remove(&victim);
        }
        self.tick += 1;
        self.order.insert(self.tick, key.clone());
        self.entries.insert(key, (value, self.tick));
    }

    pub fn invalidate(&mut self, path: &str) {
        for listing in [false, true] {
            if let Some((_, stamp)) = self.entries.remove(&(path.to_string(), listing)) {
                self.order.remove(&stamp);
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }
}

/// A mounted-volume handle that routes metadata queries through a [`MetaCache`].
pub struct Vfs {
    fs: Box<dyn FlashFs>,
    cache: MetaCache,
    cache_enabled: bool,
}

impl Vfs {
    pub fn new(fs: Box<dyn FlashFs>) -> Self {
        Self::with_cache(fs, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_cache(fs: Box<dyn FlashFs>, capacity: usize) -> Self {
        Self {
            fs,
            cache: MetaCache::new(capacity),
            cache_enabled: capacity > 0,
        }
    }

    pub fn fs(&self) -> &dyn FlashFs {
        self.fs.as_ref()
    }

    pub fn fs_mut(&mut self) -> &mut dyn FlashFs {
        self.fs.as_mut()
    }

    pub fn into_fs(self) -> Box<dyn FlashFs> {
        self.fs
    }

    pub fn cache(&self) -> &MetaCache {
        &self.cache
    }

    pub fn mount(&mut self) -> FsResult<()> {
        self.cache.clear();
        self.fs.mount()
    }

    pub fn unmount(&mut self) -> FsResult<()> {
        self.cache.clear();
        self.fs.unmount()
    }

    fn touch_parent(&mut self, path: &str) {
        let parent = parent_of(path);
        self.cache.invalidate(&parent);
    }

    pub fn create_file(&mut self, path: &str) -> FsResult<InodeId> {
        self.cache.invalidate(path);
        self.touch_parent(path);
        self.fs.create_file(path)
    }

    pub fn mkdir(&mut self, path: &str) -> FsResult<InodeId> {
        self.cache.invalidate(path);
        self.touch_parent(path);
        self.fs.mkdir(path)
    }

    pub fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> FsResult<()> {
        self.cache.invalidate(path);
        self.fs.write_file(path, offset, data)
    }

    pub fn read_file(&mut self, path: &str) -> FsResult<Vec<u8>> {
        self.fs.read_file(path)
    }

    pub fn delete_file(&mut self, path: &str) -> FsResult<()> {
        self.cache.invalidate(path);
        self.touch_parent(path);
        self.fs.delete_file(path)
    }

    pub fn rmdir(&mut self, path: &str) -> FsResult<()> {
        self.cache.invalidate(path);
        self.touch_parent(path);
        self.fs.rmdir(path)
    }

    pub fn gc_step(&mut self) -> FsResult<GcProgress> {
        self.fs.gc_step()
    }

    pub fn readdir(&mut self, path: &str) -> FsResult<Vec<DirEntry>> {
        if !self.fs.is_mounted() {
            return Err(FsError::NotMounted);
        }
        if self.cache_enabled {
            if let Some(Cached::Listing(l)) = self.cache.get(path, true) {
                return Ok(l);
            }
        }
        let listing = self.fs.readdir(path)?;
        if self.cache_enabled {
            self.cache.put(path, true, Cached::Listing(listing.clone()));
        }
        Ok(listing)
    }

    pub fn stat(&mut self, path: &str) -> FsResult<FileAttr> {
        if !self.fs.is_mounted() {
            return Err(FsError::NotMounted);
        }
        if self.cache_enabled {
            if let Some(Cached::Attr(a)) = self.cache.get(path, false) {
                return Ok(a);
            }
        }
        let attr = self.fs.stat(path)?;
        if self.cache_enabled {
            self.cache.put(path, false, Cached::Attr(attr));
        }
        Ok(attr)
    }

    pub fn lookup(&mut self, path: &str) -> FsResult<InodeId> {
        self.stat(path).map(|a| a.inode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListingEntry {
    pub path: String,
    pub attr: FileAttr,
}

/// Host CPU cost of handling one directory entry in a tree walk.
pub const ENTRY_CPU_US: u64 = 2;

/// `ls -R`: every entry below `path`, pre-order, names sorted within each
/// directory, each one stat'ed.
pub fn readdir_recursive(vfs: &mut Vfs, path: &str) -> FsResult<Vec<ListingEntry>> {
    let attr = vfs.stat(path)?;
    if attr.kind != FileKind::Dir {
        return Err(FsError::NotADirectory(path.to_string()));
    }
    let mut out = Vec::new();
    walk_ls(vfs, path, &mut out)?;
    Ok(out)
}

fn walk_ls(vfs: &mut Vfs, dir: &str, out: &mut Vec<ListingEntry>) -> FsResult<()> {
    let mut entries = vfs.readdir(dir)?;
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    vfs.fs_mut().chip_mut().charge_cpu(ENTRY_CPU_US * entries.len() as u64);
    for e in entries {
        let path = join(dir, &e.name);
        let attr = vfs.stat(&path)?;
        let is_dir = attr.kind == FileKind::Dir;
        out.push(ListingEntry {
            path: path.clone(),
            attr,
        });
        if is_dir {
            walk_ls(vfs, &path, out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotFoundReport {
    pub visited: u64,
    pub elapsed_us: u64,
    pub matches: u64,
}

/// `find <path> -name <name>` for a name expected to be absent: the whole
/// tree is traversed using directory entry types only.
pub fn find_missing(vfs: &mut Vfs, path: &str, name: &str) -> FsResult<NotFoundReport> {
    if !vfs.fs().is_mounted() {
        return Err(FsError::NotMounted);
    }
    let start = vfs.fs().chip().elapsed();
    let mut report = NotFoundReport {
        visited: 0,
        elapsed_us: 0,
        matches: 0,
    };
    let mut stack = vec![path.to_string()];
    while let Some(dir) = stack.pop() {
        let mut entries = vfs.readdir(&dir)?;
        entries.sort_by(|a, b| b.name.cmp(&a.name));
        vfs.fs_mut().chip_mut().charge_cpu(ENTRY_CPU_US * entries.len() as u64);
        for e in entries {
            report.visited += 1;
            if e.name == name {
                report.matches += 1;
            }
            if e.kind == FileKind::Dir {
                stack.push(join(&dir, &e.name));
            }
        }
    }
    report.elapsed_us = vfs.fs().chip().elapsed() - start;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_parsing() {
        assert_eq!(components("/").unwrap(), Vec::<&str>::new());
        assert_eq!(components("/a/b").unwrap(), vec!["a", "b"]);
        assert!(components("a/b").is_err());
        assert!(components("/a/../b").is_err());
        assert_eq!(split_parent("/a/b").unwrap(), (vec!["a"], "b"));
        assert!(split_parent("/").is_err());
        assert_eq!(join("/", "x"), "/x");
        assert_eq!(join("/a", "x"), "/a/x");
        assert_eq!(parent_of("/a/x"), "/a");
        assert_eq!(parent_of("/x"), "/");
    }

    #[test]
    fn cache_lru_eviction_and_counters() {
        let mut c = MetaCache::new(2);
        let attr = |i| Cached::Attr(FileAttr { kind: FileKind::File, size: 0, inode: i });
        c.put("/a", false, attr(1));
        c.put("/b", false, attr(2));
        assert!(c.get("/a", false).is_some());
        c.put("/c", false, attr(3));
        assert!(c.get("/b", false).is_none());
        assert!(c.get("/a", false).is_some());
        assert!(c.get("/c", false).is_some());
        assert_eq!(c.len(), 2);
        assert_eq!((c.hits, c.misses), (3, 1));
        c.invalidate("/a");
        assert!(c.get("/a", false).is_none());
        c.clear();
        assert!(c.is_empty());
    }
}
