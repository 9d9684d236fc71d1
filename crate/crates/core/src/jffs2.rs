//! JFFS2-style log-structured file system.
//!
//! Storage is a log of page-aligned nodes. A node is either a directory entry
//! (`Dirent`) or a range of file data. Nodes are never rewritten: a newer
//! version supersedes the old one, whose block then sits on the dirty list
//! until the garbage collector erases it. Nothing besides the nodes is kept
//! on flash, so mounting scans the whole partition.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_container, encode_container, Codec, CONTAINER_HEADER_LEN};
use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, FlashError, PageState, Partition};
use crate::vfs::{
    components, split_parent, DirEntry, FileAttr, FileKind, FlashFs, FsKind, GcProgress, InodeId,
    ROOT_INODE,
};
use crate::wire::{pad_to, Dec, Enc};

const NODE_MAGIC: u16 = 0x1985;
const KIND_DIRENT: u8 = 1;
const KIND_DATA: u8 = 2;
const NODE_HEADER_LEN: usize = 20;
const NODE_CRC_LEN: usize = 4;
/// Free blocks held back for the garbage collector.
const RESERVE_BLOCKS: usize = 2;
pub const MIN_BLOCKS: u32 = 5;
const MIN_TAIL_DATA: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jffs2Config {
    pub codec: Codec,
    /// Probability that a GC pass picks a clean block instead of a dirty one.
    pub wear_prob: f64,
    /// Background GC runs while fewer free blocks than this remain.
    pub gc_free_trigger: usize,
    pub seed: u64,
    /// Pack nodes back to back through a page buffer, as an offline image
    /// builder does. Off, every node starts on a fresh page.
    pub pack_nodes: bool,
}

impl Default for Jffs2Config {
    fn default() -> Self {
        Self {
            codec: Codec::Deflate,
            wear_prob: 0.01,
            gc_free_trigger: 8,
            seed: 0,
            pack_nodes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Dirent,
    DataRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcState {
    Formatting,
    Idle,
    Collecting,
}

#[derive(Debug, Clone)]
struct NodeRef {
    block: u32,
    /// Byte offset within the block.
    offs: u32,
    len: u32,
    /// Bytes accounted to this node, including trailing page padding.
    size: u32,
    ino: u32,
    version: u32,
    kind: NodeKind,
    valid: bool,
    /// Data nodes: number of fragments still pointing here.
    refs: u32,
    /// Dirents: target inode, 0 for a deletion marker.
    target: u32,
    name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Free,
    Used,
    PendingFormat,
    Bad,
}

#[derive(Debug, Clone)]
struct Block {
    state: BlockState,
    next_offs: u32,
    valid_bytes: u32,
    dirty_bytes: u32,
    nodes: Vec<u64>,
}

impl Block {
    fn empty(state: BlockState) -> Self {
        Self {
            state,
            next_offs: 0,
            valid_bytes: 0,
            dirty_bytes: 0,
            nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Frag {
    end: u64,
    node: u64,
    /// Offset of `start` within the node's raw data.
    node_off: u64,
}

#[derive(Debug, Clone)]
struct Child {
    ino: u32,
    kind: FileKind,
    node: u64,
}

#[derive(Debug, Clone)]
enum Inode {
    File {
        frags: BTreeMap<u64, Frag>,
        size: u64,
    },
    Dir {
        children: BTreeMap<String, Child>,
        /// Dirent nodes of the children have been read since mount.
        loaded: bool,
    },
}

/// The three block lists; together they partition the usable blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockLists {
    pub free: Vec<u32>,
    pub clean: Vec<u32>,
    pub dirty: Vec<u32>,
}

/// A decoded node, as found by the mount scan.
struct ScannedNode {
    block: u32,
    offs: u32,
    len: u32,
    size: u32,
    kind: NodeKind,
    ino: u32,
    version: u32,
    offset: u32,
    body: Vec<u8>,
}

pub struct Jffs2 {
    chip: FlashChip,
    part: Partition,
    cfg: Jffs2Config,
    rng: ChaCha8Rng,
    pending_format: VecDeque<u32>,
    mounted: bool,
    blocks: Vec<Block>,
    free: VecDeque<u32>,
    write_block: Option<u32>,
    wbuf: Vec<u8>,
    nodes: HashMap<u64, NodeRef>,
    next_node: u64,
    inodes: HashMap<u32, Inode>,
    dirents: HashMap<(u32, String), Vec<u64>>,
    next_version: u32,
    next_ino: u32,
    collecting: bool,
    clean_picks: u64,
}

impl Jffs2 {
    /// Opens an existing image; call [`FlashFs::mount`] next.
    pub fn open(chip: FlashChip, part: Partition, cfg: Jffs2Config) -> FsResult<Self> {
        if part.block_count < MIN_BLOCKS {
            return Err(FsError::PartitionTooSmall(part.block_count));
        }
        Ok(Self {
            chip,
            part,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            pending_format: VecDeque::new(),
            mounted: false,
            blocks: Vec::new(),
            free: VecDeque::new(),
            write_block: None,
            wbuf: Vec::new(),
            nodes: HashMap::new(),
            next_node: 1,
            inodes: HashMap::new(),
            dirents: HashMap::new(),
            next_version: 1,
            next_ino: ROOT_INODE as u32 + 1,
            collecting: false,
            clean_picks: 0,
        })
    }

    /// Creates a file system on `part`. No flash work happens here: every
    /// block is queued for the background format task, which erases them
    /// one at a time between foreground operations.
    pub fn mkfs(chip: FlashChip, part: Partition, cfg: Jffs2Config) -> FsResult<Self> {
        let mut fs = Self::open(chip, part, cfg)?;
        for b in 0..part.block_count {
            if !fs.chip.is_bad(&part, b)? {
                fs.pending_format.push_back(b);
            }
        }
        Ok(fs)
    }

    pub fn config(&self) -> &Jffs2Config {
        &self.cfg
    }

    pub fn set_wear_prob(&mut self, p: f64) {
        self.cfg.wear_prob = p;
    }

    pub fn gc_state(&self) -> GcState {
        if !self.pending_format.is_empty() {
            GcState::Formatting
        } else if self.collecting {
            GcState::Collecting
        } else {
            GcState::Idle
        }
    }

    pub fn pending_format(&self) -> usize {
        self.pending_format.len()
    }

    /// Number of GC passes that picked a clean block.
    pub fn clean_picks(&self) -> u64 {
        self.clean_picks
    }

    pub fn valid_node_count(&self) -> usize {
        self.nodes.values().filter(|n| n.valid).count()
    }

    /// Valid (dirent, data) node counts.
    pub fn node_counts(&self) -> (usize, usize) {
        let valid = self.nodes.values().filter(|n| n.valid);
        let dirents = valid.clone().filter(|n| n.kind == NodeKind::Dirent).count();
        (dirents, self.valid_node_count() - dirents)
    }

    /// Valid nodes per owning inode, as (version, pages spanned) pairs.
    pub fn inode_map(&self) -> BTreeMap<u32, Vec<(u32, u32)>> {
        let pb = self.page_bytes() as u32;
        let mut out: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for n in self.nodes.values().filter(|n| n.valid) {
            let pages = (n.offs + n.len).div_ceil(pb) - n.offs / pb;
            out.entry(n.ino).or_default().push((n.version, pages));
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }

    pub fn block_lists(&self) -> BlockLists {
        let mut lists = BlockLists::default();
        for (i, b) in self.blocks.iter().enumerate() {
            let i = i as u32;
            match b.state {
                BlockState::Free => lists.free.push(i),
                BlockState::Used if b.dirty_bytes > 0 => lists.dirty.push(i),
                BlockState::Used => lists.clean.push(i),
                _ => {}
            }
        }
        lists
    }

    /// Checks the block-list partition and page accounting; used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.mounted {
            return Ok(());
        }
        let lists = self.block_lists();
        let mut seen = HashSet::new();
        for b in lists.free.iter().chain(&lists.clean).chain(&lists.dirty) {
            if !seen.insert(*b) {
                return Err(format!("block {b} on two lists"));
            }
        }
        let usable = self
            .blocks
            .iter()
            .filter(|b| matches!(b.state, BlockState::Free | BlockState::Used))
            .count();
        if seen.len() != usable {
            return Err("lists do not cover usable blocks".into());
        }
        let ppb = self.ppb();
        for &b in &lists.free {
            for p in 0..ppb {
                if self.chip.page_state(&self.part, b * ppb + p).map_err(|e| e.to_string())?
                    != PageState::Erased
                {
                    return Err(format!("free block {b} has programmed page {p}"));
                }
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let valid: u32 = b
                .nodes
                .iter()
                .map(|id| &self.nodes[id])
                .filter(|n| n.valid)
                .map(|n| n.size)
                .sum();
            if valid != b.valid_bytes {
                return Err(format!("block {i}: valid bytes {} != {valid}", b.valid_bytes));
            }
            if b.state == BlockState::Used && b.dirty_bytes == 0 && b.nodes.iter().any(|id| !self.nodes[id].valid) {
                return Err(format!("clean block {i} holds an invalid node"));
            }
        }
        Ok(())
    }

    fn page_bytes(&self) -> usize {
        self.chip.geometry().page_data_bytes
    }

    fn ppb(&self) -> u32 {
        self.chip.geometry().pages_per_block
    }

    fn max_node_bytes(&self) -> usize {
        self.chip.geometry().block_bytes() / 2
    }

    /// Raw payload that still fits in the current write block as one node.
    fn room_in_write_block(&self) -> usize {
        let Some(b) = self.write_block else { return 0 };
        let block_bytes = self.chip.geometry().block_bytes();
        let left = block_bytes - self.blocks[b as usize].next_offs as usize;
        let left = if self.cfg.pack_nodes {
            left / 4 * 4
        } else {
            left / self.page_bytes() * self.page_bytes()
        };
        left.saturating_sub(NODE_HEADER_LEN + NODE_CRC_LEN + CONTAINER_HEADER_LEN)
    }

    /// Largest raw payload a single data node can carry.
    pub fn max_data_per_node(&self) -> usize {
        self.max_node_bytes() - NODE_HEADER_LEN - NODE_CRC_LEN - CONTAINER_HEADER_LEN
    }

    fn require_mounted(&self) -> FsResult<()> {
        if self.mounted {
            Ok(())
        } else {
            Err(FsError::NotMounted)
        }
    }

    // ---- node encoding ----

    fn encode_node(kind: u8, ino: u32, version: u32, offset: u32, body: &[u8]) -> Vec<u8> {
        let mut e = Enc::new();
        e.u16(NODE_MAGIC)
            .u8(kind)
            .u8(0)
            .u32(ino)
            .u32(version)
            .u32(offset)
            .u32(body.len() as u32)
            .bytes(body);
        let crc = crc32fast::hash(&e.buf);
        e.u32(crc);
        e.finish()
    }

    fn dirent_body(target: u32, kind: FileKind, name: &str) -> Vec<u8> {
        let mut e = Enc::new();
        e.u32(target).u8(kind.code()).str(name);
        e.finish()
    }

    // ---- space management ----

    fn pages_for(&self, len: usize) -> u32 {
        len.div_ceil(self.page_bytes()) as u32
    }

    /// Appends an encoded node to the log and returns its (block, offs, size).
    fn append_node(&mut self, bytes: &[u8], foreground: bool) -> FsResult<(u32, u32, u32)> {
        let pb = self.page_bytes();
        let size = if self.cfg.pack_nodes {
            bytes.len().div_ceil(4) * 4
        } else {
            self.pages_for(bytes.len()) as usize * pb
        } as u32;
        debug_assert!(bytes.len() <= self.max_node_bytes());
        let block_bytes = self.chip.geometry().block_bytes() as u32;
        let fits = self
            .write_block
            .map(|b| self.blocks[b as usize].next_offs + size <= block_bytes)
            .unwrap_or(false);
        if !fits {
            self.flush_wbuf()?;
            self.write_block = None;
            let b = self.take_free_block(foreground)?;
            self.write_block = Some(b);
        }
        let block = self.write_block.expect("write block");
        let offs = self.blocks[block as usize].next_offs;
        let base = block * self.ppb();
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        if self.cfg.pack_nodes {
            let mut page = (offs as usize - self.wbuf.len()) / pb;
            self.wbuf.extend_from_slice(bytes);
            self.wbuf.resize(self.wbuf.len() + size as usize - bytes.len(), 0xFF);
            while self.wbuf.len() >= pb {
                let rest = self.wbuf.split_off(pb);
                let full = std::mem::replace(&mut self.wbuf, rest);
                self.chip
                    .program_page(&self.part, base + page as u32, &full, &oob)?;
                page += 1;
            }
        } else {
            let first = offs / pb as u32;
            for (i, chunk) in bytes.chunks(pb).enumerate() {
                let data = pad_to(chunk, pb);
                self.chip
                    .program_page(&self.part, base + first + i as u32, &data, &oob)?;
            }
        }
        let b = &mut self.blocks[block as usize];
        b.state = BlockState::Used;
        b.next_offs += size;
        b.valid_bytes += size;
        Ok((block, offs, size))
    }

    /// Programs the partially filled page of the packed write buffer.
    fn flush_wbuf(&mut self) -> FsResult<()> {
        let Some(block) = self.write_block else {
            return Ok(());
        };
        if self.wbuf.is_empty() {
            return Ok(());
        }
        let pb = self.page_bytes();
        let b = &self.blocks[block as usize];
        let page = (b.next_offs as usize - self.wbuf.len()) / pb;
        let data = pad_to(&std::mem::take(&mut self.wbuf), pb);
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        let abs = block * self.ppb() + page as u32;
        self.chip.program_page(&self.part, abs, &data, &oob)?;
        let end = ((page + 1) * pb) as u32;
        let b = &mut self.blocks[block as usize];
        b.dirty_bytes += end - b.next_offs;
        b.next_offs = end;
        Ok(())
    }

    fn take_free_block(&mut self, foreground: bool) -> FsResult<u32> {
        if self.free.is_empty() {
            if let Some(b) = self.pending_format.pop_front() {
                self.format_block(b)?;
            }
        }
        if foreground {
            let mut guard = self.blocks.len() * 2 + 8;
            while self.free.len() <= RESERVE_BLOCKS {
                if guard == 0 {
                    return Err(FsError::NoSpace);
                }
                guard -= 1;
                if let Some(b) = self.pending_format.pop_front() {
                    self.format_block(b)?;
                    continue;
                }
                match self.gc_pass() {
                    Ok(_) => {}
                    Err(FsError::NothingToCollect) => return Err(FsError::NoSpace),
                    Err(e) => return Err(e),
                }
            }
        }
        self.free.pop_front().ok_or(FsError::NoSpace)
    }

    fn format_block(&mut self, b: u32) -> FsResult<()> {
        match self.chip.erase_block(&self.part, b) {
            Ok(()) => {
                if !self.blocks.is_empty() {
                    self.blocks[b as usize] = Block::empty(BlockState::Free);
                    self.free.push_back(b);
                }
                Ok(())
            }
            Err(FlashError::BlockWornOut(_)) => {
                if !self.blocks.is_empty() {
                    self.blocks[b as usize] = Block::empty(BlockState::Bad);
                }
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn add_node(&mut self, r: NodeRef) -> u64 {
        let id = self.next_node;
        self.next_node += 1;
        self.blocks[r.block as usize].nodes.push(id);
        self.nodes.insert(id, r);
        id
    }

    fn obsolete(&mut self, id: u64) {
        let n = self.nodes.get_mut(&id).expect("node");
        if !n.valid {
            return;
        }
        n.valid = false;
        let b = &mut self.blocks[n.block as usize];
        b.valid_bytes -= n.size;
        b.dirty_bytes += n.size;
    }

    /// The newest dirent of a key decides the name. A deletion marker stays
    /// valid only while older dirents of the same key are still on flash.
    fn refresh_key(&mut self, key: &(u32, String)) {
        let Some(list) = self.dirents.get(key) else {
            return;
        };
        if list.is_empty() {
            self.dirents.remove(key);
            return;
        }
        let newest = *list
            .iter()
            .max_by_key(|id| self.nodes[*id].version)
            .expect("non-empty");
        let others: Vec<u64> = list.iter().copied().filter(|&id| id != newest).collect();
        let lone = others.is_empty();
        for id in others {
            self.obsolete(id);
        }
        if self.nodes[&newest].target == 0 && lone {
            self.obsolete(newest);
        }
    }

    // ---- garbage collection ----

    fn gc_pass(&mut self) -> FsResult<GcProgress> {
        let wb = self.write_block;
        let mut clean = Vec::new();
        let mut dirtiest: Option<(u32, u32)> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let i = i as u32;
            if b.state != BlockState::Used || Some(i) == wb {
                continue;
            }
            if b.dirty_bytes == 0 {
                clean.push(i);
            } else if dirtiest.map(|(_, d)| b.dirty_bytes > d).unwrap_or(true) {
                dirtiest = Some((i, b.dirty_bytes));
            }
        }
        let roll: f64 = self.rng.random();
        let (victim, clean_pick) = if roll < self.cfg.wear_prob && !clean.is_empty() {
            let idx = self.rng.random_range(0..clean.len());
            (clean[idx], true)
        } else if let Some((b, _)) = dirtiest {
            (b, false)
        } else {
            return Err(FsError::NothingToCollect);
        };
        if clean_pick {
            self.clean_picks += 1;
        }
        self.collecting = true;
        let res = self.collect_block(victim);
        self.collecting = false;
        let copied = res?;
        Ok(GcProgress {
            victim,
            copied,
            erased: 1,
            clean_pick,
        })
    }

    fn collect_block(&mut self, victim: u32) -> FsResult<u32> {
        let ids = self.blocks[victim as usize].nodes.clone();
        let mut copied = 0;
        for id in &ids {
            if !self.nodes[id].valid {
                continue;
            }
            let raw = self.read_node_raw(*id)?;
            let (block, offs, size) = self.append_node(&raw, false)?;
            let n = self.nodes.get_mut(id).expect("node");
            n.block = block;
            n.offs = offs;
            n.size = size;
            self.blocks[block as usize].nodes.push(*id);
            copied += 1;
        }
        let mut touched_keys = Vec::new();
        for id in &ids {
            let n = &self.nodes[id];
            if n.block == victim {
                let n = self.nodes.remove(id).expect("node");
                if let Some(name) = n.name {
                    let key = (n.ino, name);
                    if let Some(list) = self.dirents.get_mut(&key) {
                        list.retain(|x| x != id);
                    }
                    touched_keys.push(key);
                }
            }
        }
        self.blocks[victim as usize] = Block::empty(BlockState::Used);
        self.format_block(victim)?;
        for key in touched_keys {
            self.refresh_key(&key);
        }
        Ok(copied)
    }

    /// Background work granted between foreground operations.
    fn background_tick(&mut self) -> FsResult<()> {
        if !self.mounted {
            return Ok(());
        }
        if let Some(b) = self.pending_format.pop_front() {
            return self.format_block(b);
        }
        if self.free.len() < self.cfg.gc_free_trigger {
            match self.gc_pass() {
                Ok(_) | Err(FsError::NothingToCollect) | Err(FsError::NoSpace) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn tick<T>(&mut self, r: FsResult<T>) -> FsResult<T> {
        let v = r?;
        self.background_tick()?;
        Ok(v)
    }

    // ---- namespace ----

    /// Reads exactly the bytes of one node; the buffered page comes from RAM.
    fn read_node_raw(&mut self, id: u64) -> FsResult<Vec<u8>> {
        let n = &self.nodes[&id];
        let pb = self.page_bytes() as u32;
        let (block, offs, len) = (n.block, n.offs, n.len);
        let (first, last) = (offs / pb, (offs + len - 1) / pb);
        let wbuf_page = match self.write_block {
            Some(w) if w == block && !self.wbuf.is_empty() => {
                Some((self.blocks[w as usize].next_offs - self.wbuf.len() as u32) / pb)
            }
            _ => None,
        };
        let mut raw = Vec::with_capacity(((last - first + 1) * pb) as usize);
        for p in first..=last {
            if Some(p) == wbuf_page {
                raw.extend_from_slice(&pad_to(&self.wbuf, pb as usize));
            } else {
                let abs = block * self.ppb() + p;
                raw.extend_from_slice(self.chip.read_page(&self.part, abs)?.data);
            }
        }
        let start = (offs - first * pb) as usize;
        Ok(raw[start..start + len as usize].to_vec())
    }

    fn ensure_loaded(&mut self, dir: u32) -> FsResult<()> {
        let ids: Vec<u64> = match self.inodes.get(&dir) {
            Some(Inode::Dir { children, loaded: false }) => {
                children.values().map(|c| c.node).collect()
            }
            _ => return Ok(()),
        };
        for id in ids {
            self.read_node_raw(id)?;
        }
        if let Some(Inode::Dir { loaded, .. }) = self.inodes.get_mut(&dir) {
            *loaded = true;
        }
        Ok(())
    }

    fn resolve_parts(&mut self, parts: &[&str], full: &str) -> FsResult<u32> {
        let mut cur = ROOT_INODE as u32;
        for name in parts {
            self.ensure_loaded(cur)?;
            cur = match self.inodes.get(&cur) {
                Some(Inode::Dir { children, .. }) => match children.get(*name) {
                    Some(c) => c.ino,
                    None => return Err(FsError::NotFound(full.to_string())),
                },
                _ => return Err(FsError::NotADirectory(full.to_string())),
            };
        }
        Ok(cur)
    }

    fn resolve(&mut self, path: &str) -> FsResult<u32> {
        self.require_mounted()?;
        let parts = components(path)?;
        self.resolve_parts(&parts, path)
    }

    fn resolve_parent(&mut self, path: &str) -> FsResult<(u32, String)> {
        self.require_mounted()?;
        let (parent, name) = split_parent(path)?;
        let dir = self.resolve_parts(&parent, path)?;
        match self.inodes.get(&dir) {
            Some(Inode::Dir { .. }) => {}
            _ => return Err(FsError::NotADirectory(path.to_string())),
        }
        self.ensure_loaded(dir)?;
        Ok((dir, name.to_string()))
    }

    fn child(&self, dir: u32, name: &str) -> Option<Child> {
        match self.inodes.get(&dir) {
            Some(Inode::Dir { children, .. }) => children.get(name).cloned(),
            _ => None,
        }
    }

    fn write_dirent(&mut self, parent: u32, name: &str, target: u32, kind: FileKind) -> FsResult<u64> {
        let version = self.next_version;
        self.next_version += 1;
        let body = Self::dirent_body(target, kind, name);
        let bytes = Self::encode_node(KIND_DIRENT, parent, version, 0, &body);
        let (block, offs, size) = self.append_node(&bytes, true)?;
        let id = self.add_node(NodeRef {
            block,
            offs,
            len: bytes.len() as u32,
            size,
            ino: parent,
            version,
            kind: NodeKind::Dirent,
            valid: true,
            refs: 0,
            target,
            name: Some(name.to_string()),
        });
        let key = (parent, name.to_string());
        self.dirents.entry(key.clone()).or_default().push(id);
        self.refresh_key(&key);
        Ok(id)
    }

    fn create_entry(&mut self, path: &str, kind: FileKind) -> FsResult<InodeId> {
        let (parent, name) = self.resolve_parent(path)?;
        if self.child(parent, &name).is_some() {
            return Err(FsError::Exists(path.to_string()));
        }
        let ino = self.next_ino;
        self.next_ino += 1;
        let node = self.write_dirent(parent, &name, ino, kind)?;
        let inode = match kind {
            FileKind::File => Inode::File {
                frags: BTreeMap::new(),
                size: 0,
            },
            FileKind::Dir => Inode::Dir {
                children: BTreeMap::new(),
                loaded: true,
            },
        };
        self.inodes.insert(ino, inode);
        if let Some(Inode::Dir { children, .. }) = self.inodes.get_mut(&parent) {
            children.insert(name, Child { ino, kind, node });
        }
        Ok(ino as InodeId)
    }

    fn remove_entry(&mut self, path: &str, kind: FileKind) -> FsResult<()> {
        let (parent, name) = self.resolve_parent(path)?;
        let child = self
            .child(parent, &name)
            .ok_or_else(|| FsError::NotFound(path.to_string()))?;
        match (kind, child.kind) {
            (FileKind::File, FileKind::Dir) => return Err(FsError::IsADirectory(path.to_string())),
            (FileKind::Dir, FileKind::File) => return Err(FsError::NotADirectory(path.to_string())),
            _ => {}
        }
        if let Some(Inode::Dir { children, .. }) = self.inodes.get(&child.ino) {
            if !children.is_empty() {
                return Err(FsError::NotEmpty(path.to_string()));
            }
        }
        self.write_dirent(parent, &name, 0, child.kind)?;
        if let Some(Inode::File { frags, .. }) = self.inodes.remove(&child.ino) {
            let ids: HashSet<u64> = frags.values().map(|f| f.node).collect();
            for id in ids {
                self.obsolete(id);
            }
        }
        if let Some(Inode::Dir { children, .. }) = self.inodes.get_mut(&parent) {
            children.remove(&name);
        }
        Ok(())
    }

    fn insert_frag(&mut self, ino: u32, start: u64, end: u64, node: u64) {
        let Some(Inode::File { frags, size }) = self.inodes.get_mut(&ino) else {
            return;
        };
        let overlapping: Vec<u64> = frags
            .range(..end)
            .filter(|(_, f)| f.end > start)
            .map(|(s, _)| *s)
            .collect();
        let mut released = Vec::new();
        let mut retained = Vec::new();
        for s in overlapping {
            let f = frags.remove(&s).expect("frag");
            released.push(f.node);
            if s < start {
                frags.insert(s, Frag { end: start, ..f });
                retained.push(f.node);
            }
            if f.end > end {
                frags.insert(
                    end,
                    Frag {
                        end: f.end,
                        node: f.node,
                        node_off: f.node_off + (end - s),
                    },
                );
                retained.push(f.node);
            }
        }
        frags.insert(start, Frag { end, node, node_off: 0 });
        *size = (*size).max(end);
        self.nodes.get_mut(&node).expect("node").refs += 1;
        for id in retained {
            self.nodes.get_mut(&id).expect("node").refs += 1;
        }
        for id in released {
            let n = self.nodes.get_mut(&id).expect("node");
            n.refs -= 1;
            if n.refs == 0 {
                self.obsolete(id);
            }
        }
    }

    fn write_data(&mut self, ino: u32, offset: u64, data: &[u8]) -> FsResult<()> {
        let chunk = self.max_data_per_node();
        let mut off = offset;
        let mut rest = data;
        while !rest.is_empty() {
            // Fill the tail of the current write block rather than leaving it empty.
            let room = self.room_in_write_block();
            let cap = if room >= MIN_TAIL_DATA { room.min(chunk) } else { chunk };
            let (piece, tail) = rest.split_at(cap.min(rest.len()));
            rest = tail;
            if self.cfg.codec != Codec::None {
                self.chip.charge_compress(piece.len());
            }
            let container = encode_container(self.cfg.codec, piece);
            let version = self.next_version;
            self.next_version += 1;
            let bytes = Self::encode_node(KIND_DATA, ino, version, off as u32, &container);
            let (block, offs, size) = self.append_node(&bytes, true)?;
            let id = self.add_node(NodeRef {
                block,
                offs,
                len: bytes.len() as u32,
                size,
                ino,
                version,
                kind: NodeKind::DataRange,
                valid: true,
                refs: 0,
                target: 0,
                name: None,
            });
            self.insert_frag(ino, off, off + piece.len() as u64, id);
            off += piece.len() as u64;
        }
        Ok(())
    }

    fn read_data(&mut self, ino: u32) -> FsResult<Vec<u8>> {
        let (frags, size) = match self.inodes.get(&ino) {
            Some(Inode::File { frags, size }) => (frags.clone(), *size),
            _ => return Err(FsError::IsADirectory(format!("inode {ino}"))),
        };
        let mut out = vec![0u8; size as usize];
        let mut decoded: HashMap<u64, Vec<u8>> = HashMap::new();
        for (start, f) in frags {
            if !decoded.contains_key(&f.node) {
                let raw = self.read_node_raw(f.node)?;
                let node = parse_node(&raw)?;
                let (payload, _) = decode_container(&node.body)?;
                decoded.insert(f.node, payload);
            }
            let payload = &decoded[&f.node];
            let len = (f.end - start) as usize;
            let src = f.node_off as usize;
            out[start as usize..start as usize + len].copy_from_slice(&payload[src..src + len]);
        }
        Ok(out)
    }

    // ---- mount ----

    fn scan(&mut self) -> FsResult<Vec<ScannedNode>> {
        let ppb = self.ppb();
        let pb = self.page_bytes();
        let block_bytes = ppb as usize * pb;
        let pending: HashSet<u32> = self.pending_format.iter().copied().collect();
        let mut found = Vec::new();
        self.blocks = Vec::with_capacity(self.part.block_count as usize);
        self.free.clear();
        for b in 0..self.part.block_count {
            if self.chip.is_bad(&self.part, b)? {
                self.blocks.push(Block::empty(BlockState::Bad));
                continue;
            }
            let mut data = Vec::with_capacity(block_bytes);
            let mut programmed = Vec::with_capacity(ppb as usize);
            for p in 0..ppb {
                let page = self.chip.read_page(&self.part, b * ppb + p)?;
                programmed.push(page.state == PageState::Programmed);
                data.extend_from_slice(page.data);
            }
            if pending.contains(&b) {
                self.blocks.push(Block::empty(BlockState::PendingFormat));
                continue;
            }
            if !programmed.iter().any(|&x| x) {
                self.blocks.push(Block::empty(BlockState::Free));
                self.free.push_back(b);
                continue;
            }
            let mut block = Block::empty(BlockState::Used);
            block.next_offs = block_bytes as u32;
            let mut offs = 0usize;
            while offs < block_bytes {
                let page = offs / pb;
                let page_end = (page + 1) * pb;
                let parsed = node_len(&data[offs..]).ok().and_then(|len| {
                    let end = offs + len;
                    if end > block_bytes || !programmed[page..end.div_ceil(pb)].iter().all(|&x| x) {
                        return None;
                    }
                    parse_node(&data[offs..end]).ok().map(|node| (len, node))
                });
                let Some((len, node)) = parsed else {
                    // Unparsable or erased: the rest of the page is dead.
                    block.dirty_bytes += (page_end - offs) as u32;
                    offs = page_end;
                    continue;
                };
                // A node owns its padding up to the next node or page end.
                let mut next = offs + len.div_ceil(4) * 4;
                let end_page_end = next.div_ceil(pb) * pb;
                if next < end_page_end && node_len(&data[next..]).is_err() {
                    next = end_page_end;
                }
                found.push(ScannedNode {
                    block: b,
                    offs: offs as u32,
                    len: len as u32,
                    size: (next - offs) as u32,
                    ..node
                });
                offs = next;
            }
            self.blocks.push(block);
        }
        Ok(found)
    }

    fn rebuild(&mut self, mut found: Vec<ScannedNode>) -> FsResult<()> {
        found.sort_by_key(|n| (n.version, n.block, n.offs));
        self.nodes.clear();
        self.inodes.clear();
        self.dirents.clear();
        self.next_node = 1;
        let mut max_version = 0;
        let mut max_ino = ROOT_INODE as u32;
        let mut seen_versions: HashSet<(u32, u32)> = HashSet::new();
        let mut data_nodes: Vec<(u64, u32, u32, usize)> = Vec::new();
        let mut dirent_kind: HashMap<u64, FileKind> = HashMap::new();
        for n in found {
            max_version = max_version.max(n.version);
            max_ino = max_ino.max(n.ino);
            let duplicate = !seen_versions.insert((n.ino, n.version));
            let (target, name, kind_code, raw_len) = match n.kind {
                NodeKind::Dirent => {
                    let mut d = Dec::new(&n.body);
                    let target = d.u32()?;
                    let kind = d.u8()?;
                    let name = d.str()?;
                    (target, Some(name), kind, 0)
                }
                NodeKind::DataRange => {
                    let raw = crate::codec::ContainerHeader::parse(&n.body)?.raw_len as usize;
                    (0, None, 0, raw)
                }
            };
            max_ino = max_ino.max(target);
            let id = self.next_node;
            self.next_node += 1;
            self.blocks[n.block as usize].nodes.push(id);
            self.blocks[n.block as usize].valid_bytes += n.size;
            self.nodes.insert(
                id,
                NodeRef {
                    block: n.block,
                    offs: n.offs,
                    len: n.len,
                    size: n.size,
                    ino: n.ino,
                    version: n.version,
                    kind: n.kind,
                    valid: true,
                    refs: 0,
                    target,
                    name: name.clone(),
                },
            );
            if duplicate {
                self.obsolete(id);
                continue;
            }
            match n.kind {
                NodeKind::Dirent => {
                    let kind = FileKind::from_code(kind_code)
                        .ok_or_else(|| FsError::Corrupt("dirent kind".into()))?;
                    dirent_kind.insert(id, kind);
                    self.dirents.entry((n.ino, name.unwrap())).or_default().push(id);
                }
                NodeKind::DataRange => data_nodes.push((id, n.ino, n.offset, raw_len)),
            }
        }
        self.next_version = max_version + 1;
        self.next_ino = max_ino + 1;

        // Live namespace: newest dirent per key, reachable from the root.
        let mut by_parent: HashMap<u32, Vec<(String, u64)>> = HashMap::new();
        let keys: Vec<(u32, String)> = self.dirents.keys().cloned().collect();
        for key in &keys {
            let list = &self.dirents[key];
            let newest = *list.iter().max_by_key(|id| self.nodes[*id].version).unwrap();
            if self.nodes[&newest].target != 0 {
                by_parent.entry(key.0).or_default().push((key.1.clone(), newest));
            }
        }
        let root = ROOT_INODE as u32;
        self.inodes.insert(
            root,
            Inode::Dir {
                children: BTreeMap::new(),
                loaded: false,
            },
        );
        let mut queue = VecDeque::from([root]);
        let mut live_dirents = HashSet::new();
        while let Some(dir) = queue.pop_front() {
            let Some(entries) = by_parent.remove(&dir) else {
                continue;
            };
            for (name, id) in entries {
                let target = self.nodes[&id].target;
                let kind = dirent_kind[&id];
                if self.inodes.contains_key(&target) {
                    continue;
                }
                live_dirents.insert(id);
                let inode = match kind {
                    FileKind::File => Inode::File {
                        frags: BTreeMap::new(),
                        size: 0,
                    },
                    FileKind::Dir => {
                        queue.push_back(target);
                        Inode::Dir {
                            children: BTreeMap::new(),
                            loaded: false,
                        }
                    }
                };
                self.inodes.insert(target, inode);
                if let Some(Inode::Dir { children, .. }) = self.inodes.get_mut(&dir) {
                    children.insert(name, Child { ino: target, kind, node: id });
                }
            }
        }
        // Dirents of unreachable parents are garbage.
        for key in &keys {
            let list = self.dirents[key].clone();
            let reachable = self.inodes.contains_key(&key.0);
            let newest = *list.iter().max_by_key(|id| self.nodes[*id].version).unwrap();
            for id in list {
                let keep = id == newest
                    && reachable
                    && (live_dirents.contains(&id) || self.nodes[&id].target == 0);
                if !keep {
                    self.obsolete(id);
                }
            }
            if reachable {
                self.refresh_key(key);
            }
        }
        for (id, ino, offset, raw_len) in data_nodes {
            if matches!(self.inodes.get(&ino), Some(Inode::File { .. })) {
                self.insert_frag(ino, offset as u64, offset as u64 + raw_len as u64, id);
                if self.nodes[&id].refs == 0 {
                    self.obsolete(id);
                }
            } else {
                self.obsolete(id);
            }
        }
        Ok(())
    }
}

fn node_len(raw: &[u8]) -> FsResult<usize> {
    let mut d = Dec::new(raw);
    if d.u16()? != NODE_MAGIC {
        return Err(FsError::Corrupt("bad node magic".into()));
    }
    let kind = d.u8()?;
    if kind != KIND_DIRENT && kind != KIND_DATA {
        return Err(FsError::Corrupt("bad node kind".into()));
    }
    d.take(13)?;
    let body = d.u32()? as usize;
    Ok(NODE_HEADER_LEN + body + NODE_CRC_LEN)
}

fn parse_node(raw: &[u8]) -> FsResult<ScannedNode> {
    let len = node_len(raw)?;
    if raw.len() < len {
        return Err(FsError::Corrupt("node truncated".into()));
    }
    let stored = u32::from_le_bytes(raw[len - 4..len].try_into().unwrap());
    if crc32fast::hash(&raw[..len - 4]) != stored {
        return Err(FsError::Corrupt("node CRC mismatch".into()));
    }
    let mut d = Dec::new(raw);
    d.u16()?;
    let kind = match d.u8()? {
        KIND_DIRENT => NodeKind::Dirent,
        _ => NodeKind::DataRange,
    };
    d.u8()?;
    let ino = d.u32()?;
    let version = d.u32()?;
    let offset = d.u32()?;
    let body_len = d.u32()? as usize;
    let body = d.take(body_len)?.to_vec();
    Ok(ScannedNode {
        block: 0,
        offs: 0,
        len: 0,
        size: 0,
        kind,
        ino,
        version,
        offset,
        body,
    })
}

impl FlashFs for Jffs2 {
    fn kind(&self) -> FsKind {
        FsKind::Jffs2
    }

    /// Reads every page of the partition and rebuilds the node map.
    fn mount(&mut self) -> FsResult<()> {
        if self.mounted {
            return Err(FsError::AlreadyMounted);
        }
        let found = self.scan()?;
        self.rebuild(found)?;
        self.write_block = None;
        self.mounted = true;
        Ok(())
    }

    /// Waits for the background format to finish, then drops RAM state.
    fn unmount(&mut self) -> FsResult<()> {
        self.require_mounted()?;
        while let Some(b) = self.pending_format.pop_front() {
            self.format_block(b)?;
        }
        self.flush_wbuf()?;
        self.mounted = false;
        self.blocks.clear();
        self.free.clear();
        self.nodes.clear();
        self.inodes.clear();
        self.dirents.clear();
        self.write_block = None;
        Ok(())
    }

    fn is_mounted(&self) -> bool {
        self.mounted
    }

    fn create_file(&mut self, path: &str) -> FsResult<InodeId> {
        let r = self.create_entry(path, FileKind::File);
        self.tick(r)
    }

    fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> FsResult<()> {
        let r = (|| {
            let ino = self.resolve(path)?;
            if !matches!(self.inodes.get(&ino), Some(Inode::File { .. })) {
                return Err(FsError::IsADirectory(path.to_string()));
            }
            self.write_data(ino, offset, data)
        })();
        self.tick(r)
    }

    fn read_file(&mut self, path: &str) -> FsResult<Vec<u8>> {
        let r = (|| {
            let ino = self.resolve(path)?;
            if !matches!(self.inodes.get(&ino), Some(Inode::File { .. })) {
                return Err(FsError::IsADirectory(path.to_string()));
            }
            self.read_data(ino)
        })();
        self.tick(r)
    }

    fn delete_file(&mut self, path: &str) -> FsResult<()> {
        let r = self.remove_entry(path, FileKind::File);
        self.tick(r)
    }

    fn mkdir(&mut self, path: &str) -> FsResult<InodeId> {
        let r = self.create_entry(path, FileKind::Dir);
        self.tick(r)
    }

    fn rmdir(&mut self, path: &str) -> FsResult<()> {
        if components(path)?.is_empty() {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        let r = self.remove_entry(path, FileKind::Dir);
        self.tick(r)
    }

    fn readdir(&mut self, path: &str) -> FsResult<Vec<DirEntry>> {
        let r = (|| {
            let ino = self.resolve(path)?;
            self.ensure_loaded(ino)?;
            match self.inodes.get(&ino) {
                Some(Inode::Dir { children, .. }) => Ok(children
                    .iter()
                    .map(|(name, c)| DirEntry {
                        name: name.clone(),
                        kind: c.kind,
                        inode: c.ino as InodeId,
                    })
                    .collect()),
                _ => Err(FsError::NotADirectory(path.to_string())),
            }
        })();
        self.tick(r)
    }

    fn stat(&mut self, path: &str) -> FsResult<FileAttr> {
        let r = (|| {
            let ino = self.resolve(path)?;
            Ok(match self.inodes.get(&ino) {
                Some(Inode::File { size, .. }) => FileAttr {
                    kind: FileKind::File,
                    size: *size,
                    inode: ino as InodeId,
                },
                _ => FileAttr {
                    kind: FileKind::Dir,
                    size: 0,
                    inode: ino as InodeId,
                },
            })
        })();
        self.tick(r)
    }

    fn gc_step(&mut self) -> FsResult<GcProgress> {
        self.require_mounted()?;
        self.gc_pass()
    }

    fn meta_ram_bytes(&self) -> u64 {
        let names: usize = self.dirents.keys().map(|k| k.1.len()).sum();
        let frags: usize = self
            .inodes
            .values()
            .map(|i| match i {
                Inode::File { frags, .. } => frags.len(),
                Inode::Dir { children, .. } => children.len(),
            })
            .sum();
        (self.nodes.len() * 24 + self.inodes.len() * 32 + frags * 24 + names) as u64
    }

    fn used_flash_bytes(&self) -> u64 {
        self.blocks.iter().map(|b| b.valid_bytes as u64).sum()
    }

    fn free_bytes(&self) -> u64 {
        let usable = self
            .blocks
            .iter()
            .filter(|b| b.state != BlockState::Bad)
            .count()
            .saturating_sub(RESERVE_BLOCKS + 1) as u64;
        let total = usable * self.chip.geometry().block_bytes() as u64;
        total.saturating_sub(self.used_flash_bytes())
    }

    fn chip(&self) -> &FlashChip {
        &self.chip
    }

    fn chip_mut(&mut self) -> &mut FlashChip {
        &mut self.chip
    }

    fn partition(&self) -> Partition {
        self.part
    }

    fn into_chip(self: Box<Self>) -> FlashChip {
        self.chip
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::FlashGeometry;

    fn fresh(blocks: u32, codec: Codec) -> Jffs2 {
        let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
        let part = chip.full_partition();
        let cfg = Jffs2Config {
            codec,
            ..Jffs2Config::default()
        };
        let mut fs = Jffs2::mkfs(chip, part, cfg).unwrap();
        fs.mount().unwrap();
        while fs.pending_format() > 0 {
            fs.background_tick().unwrap();
        }
        fs
    }

    #[test]
    fn too_small() {
        let chip = FlashChip::new(FlashGeometry::with_blocks(4)).unwrap();
        let part = chip.full_partition();
        assert!(matches!(
            Jffs2::mkfs(chip, part, Jffs2Config::default()),
            Err(FsError::PartitionTooSmall(4))
        ));
    }

    #[test]
    fn format_drain_costs_one_erase_per_block() {
        let chip = FlashChip::new(FlashGeometry::with_blocks(800)).unwrap();
        let part = chip.full_partition();
        let mut fs = Jffs2::mkfs(chip, part, Jffs2Config::default()).unwrap();
        assert_eq!(fs.gc_state(), GcState::Formatting);
        fs.mount().unwrap();
        let t0 = fs.chip().elapsed();
        let e0 = fs.chip().counters().erases;
        fs.unmount().unwrap();
        assert_eq!(fs.chip().counters().erases - e0, 800);
        assert_eq!(fs.chip().elapsed() - t0, 1_600_000);
        assert_eq!(fs.gc_state(), GcState::Idle);
        fs.mount().unwrap();
        let t1 = fs.chip().elapsed();
        fs.unmount().unwrap();
        assert!(fs.chip().elapsed() - t1 <= 1000);
    }

    #[test]
    fn empty_mount_reads_every_page() {
        let mut fs = fresh(400, Codec::None);
        fs.unmount().unwrap();
        let t = fs.chip().elapsed();
        fs.mount().unwrap();
        assert_eq!(fs.chip().elapsed() - t, 400 * 64 * 25);
    }

    #[test]
    fn small_write_is_one_page_node() {
        let mut fs = fresh(16, Codec::None);
        fs.create_file("/f").unwrap();
        let w0 = fs.chip().counters().writes;
        fs.write_file("/f", 0, &[3u8; 750]).unwrap();
        assert_eq!(fs.chip().counters().writes - w0, 1);
        assert_eq!(fs.read_file("/f").unwrap(), vec![3u8; 750]);
    }

    #[test]
    fn large_write_splits_into_half_block_nodes() {
        let mut fs = fresh(32, Codec::None);
        fs.create_file("/big").unwrap();
        let before = fs.valid_node_count();
        let data: Vec<u8> = (0..200 * 1024).map(|i| (i * 7 % 256) as u8).collect();
        fs.write_file("/big", 0, &data).unwrap();
        let nodes = fs.valid_node_count() - before;
        assert!(nodes >= 4, "{nodes} nodes");
        for n in fs.nodes.values() {
            assert!(n.size as usize % fs.page_bytes() == 0 && n.size as usize <= 32 * fs.page_bytes());
        }
        assert_eq!(fs.read_file("/big").unwrap(), data);
    }

    #[test]
    fn overwrite_keeps_one_valid_version() {
        let mut fs = fresh(16, Codec::None);
        fs.create_file("/f").unwrap();
        fs.write_file("/f", 0, &[1u8; 1000]).unwrap();
        let first_block = fs.write_block.unwrap();
        fs.write_file("/f", 0, &[2u8; 1000]).unwrap();
        let data_nodes: Vec<_> = fs
            .nodes
            .values()
            .filter(|n| n.kind == NodeKind::DataRange && n.valid)
            .collect();
        assert_eq!(data_nodes.len(), 1);
        assert!(fs.block_lists().dirty.contains(&first_block));
        assert_eq!(fs.read_file("/f").unwrap(), vec![2u8; 1000]);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn partial_overwrite_merges_fragments() {
        let mut fs = fresh(16, Codec::Deflate);
        fs.create_file("/f").unwrap();
        fs.write_file("/f", 0, &[1u8; 3000]).unwrap();
        fs.write_file("/f", 1000, &[2u8; 500]).unwrap();
        fs.write_file("/f", 5000, &[3u8; 10]).unwrap();
        let mut expect = vec![1u8; 3000];
        expect[1000..1500].fill(2);
        expect.resize(5000, 0);
        expect.extend_from_slice(&[3u8; 10]);
        assert_eq!(fs.read_file("/f").unwrap(), expect);
        fs.unmount().unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.read_file("/f").unwrap(), expect);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn delete_writes_one_marker_page() {
        let mut fs = fresh(16, Codec::None);
        fs.create_file("/f").unwrap();
        fs.write_file("/f", 0, &[9u8; 700]).unwrap();
        let w0 = fs.chip().counters().writes;
        fs.delete_file("/f").unwrap();
        assert_eq!(fs.chip().counters().writes - w0, 1);
        assert!(matches!(fs.stat("/f"), Err(FsError::NotFound(_))));
        fs.unmount().unwrap();
        fs.mount().unwrap();
        assert!(matches!(fs.stat("/f"), Err(FsError::NotFound(_))));
        fs.check_invariants().unwrap();
    }

    #[test]
    fn gc_on_empty_volume_has_nothing_to_collect() {
        let mut fs = fresh(16, Codec::None);
        assert_eq!(fs.gc_step(), Err(FsError::NothingToCollect));
    }

    #[test]
    fn gc_of_fully_invalid_block_is_a_bare_erase() {
        let mut fs = fresh(16, Codec::None);
        fs.set_wear_prob(0.0);
        fs.create_file("/f").unwrap();
        // Fill block with 63 overwrites of the same range.
        for i in 0..63u8 {
            fs.write_file("/f", 0, &[i; 100]).unwrap();
        }
        let victim = fs.write_block.unwrap();
        // Move the live data elsewhere so the first block is fully invalid.
        fs.write_file("/f", 0, &[200; 100]).unwrap();
        fs.delete_file("/f").unwrap();
        fs.create_file("/g").unwrap();
        assert_ne!(fs.write_block, Some(victim));
        assert_eq!(fs.blocks[victim as usize].valid_bytes, 0);
        let (t, w) = (fs.chip().elapsed(), fs.chip().counters().writes);
        let progress = fs.gc_step().unwrap();
        assert_eq!(progress.victim, victim);
        assert_eq!(progress.copied, 0);
        assert_eq!(fs.chip().elapsed() - t, 2000);
        assert_eq!(fs.chip().counters().writes, w);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn wear_prob_zero_never_picks_clean() {
        let mut fs = fresh(24, Codec::None);
        fs.set_wear_prob(0.0);
        for i in 0..40 {
            let p = format!("/c{i}");
            fs.create_file(&p).unwrap();
            fs.write_file(&p, 0, &[i as u8; 4000]).unwrap();
        }
        fs.create_file("/hot").unwrap();
        for i in 0..10_000u32 {
            fs.write_file("/hot", 0, &i.to_le_bytes()).unwrap();
            let _ = fs.gc_step();
        }
        assert_eq!(fs.clean_picks(), 0);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn remount_reproduces_tree_and_inode_map() {
        let mut fs = fresh(32, Codec::Deflate);
        fs.mkdir("/d").unwrap();
        fs.mkdir("/d/e").unwrap();
        for i in 0..20 {
            let p = format!("/d/e/f{i}");
            fs.create_file(&p).unwrap();
            fs.write_file(&p, 0, format!("file {i}").repeat(100).as_bytes()).unwrap();
        }
        fs.delete_file("/d/e/f3").unwrap();
        fs.rmdir("/d/e").unwrap_err();
        let map = fs.inode_map();
        let listing = fs.readdir("/d/e").unwrap();
        fs.unmount().unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.inode_map(), map);
        assert_eq!(fs.readdir("/d/e").unwrap(), listing);
        assert_eq!(fs.read_file("/d/e/f7").unwrap(), "file 7".repeat(100).into_bytes());
        fs.check_invariants().unwrap();
    }

    #[test]
    fn corrupt_node_is_skipped() {
        let mut fs = fresh(16, Codec::None);
        fs.create_file("/a").unwrap();
        fs.write_file("/a", 0, b"keep").unwrap();
        fs.create_file("/b").unwrap();
        fs.unmount().unwrap();
        // Locate /b's dirent (third node) and corrupt it by rebuilding the chip.
        let part = fs.part;
        let mut chip = fs.chip.clone();
        let page = 2;
        let mut data = chip.read_page(&part, page).unwrap().data.to_vec();
        data[30] ^= 0xFF;
        let mut g = chip.clone();
        g.erase_block(&part, 0).unwrap();
        for p in 0..64 {
            let src = chip.read_page(&part, p).unwrap();
            if src.state == PageState::Programmed {
                let d = if p == page { data.clone() } else { src.data.to_vec() };
                let o = src.oob.to_vec();
                g.program_page(&part, p, &d, &o).unwrap();
            }
        }
        chip = g;
        let mut fs = Jffs2::open(chip, part, Jffs2Config::default()).unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.read_file("/a").unwrap(), b"keep");
        assert!(fs.stat("/b").is_err());
        assert!(fs.block_lists().dirty.contains(&0));
    }

    #[test]
    fn packed_image_mounts_with_page_aligned_writer() {
        let chip = FlashChip::new(FlashGeometry::with_blocks(32)).unwrap();
        let part = chip.full_partition();
        let cfg = Jffs2Config {
            codec: Codec::None,
            pack_nodes: true,
            ..Jffs2Config::default()
        };
        let mut fs = Jffs2::mkfs(chip, part, cfg).unwrap();
        fs.mount().unwrap();
        fs.mkdir("/d").unwrap();
        for i in 0..20 {
            let p = format!("/d/f{i}");
            fs.create_file(&p).unwrap();
            fs.write_file(&p, 0, &vec![i as u8; 300 + i * 97]).unwrap();
        }
        // Served from the page buffer before it is programmed.
        assert_eq!(fs.read_file("/d/f19").unwrap(), vec![19u8; 300 + 19 * 97]);
        fs.unmount().unwrap();
        let programmed = fs.chip.counters().writes;
        assert!(programmed < 20, "{programmed} pages for 20 small files");
        let chip = Box::new(fs).into_chip();
        let mut fs = Jffs2::open(chip, part, Jffs2Config::default()).unwrap();
        fs.mount().unwrap();
        fs.check_invariants().unwrap();
        for i in 0..20 {
            let p = format!("/d/f{i}");
            assert_eq!(fs.read_file(&p).unwrap(), vec![i as u8; 300 + i * 97]);
        }
        fs.delete_file("/d/f3").unwrap();
        fs.write_file("/d/f4", 10, b"xyz").unwrap();
        fs.check_invariants().unwrap();
        while fs.gc_step().is_ok() {}
        fs.check_invariants().unwrap();
        assert!(fs.stat("/d/f3").is_err());
        assert_eq!(&fs.read_file("/d/f4").unwrap()[10..13], b"xyz");
    }
}
