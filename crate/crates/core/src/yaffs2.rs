//! YAFFS2-style chunk store.
//!
//! Every page holds one chunk. Chunk 0 of an object is its header (name,
//! parent, size); chunks 1.. carry file data. The OOB area holds the tags
//! that identify a chunk, so a mount without a checkpoint reads every page
//! of the partition. Chunks are written strictly sequentially and a newer
//! sequence number supersedes an older chunk with the same (object, chunk).
//!
//! The last four blocks of the partition hold the checkpoint, a snapshot of
//! the RAM tables written at clean unmount.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::codec::{decode_container, encode_container, Codec};
use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, FlashError, PageState, Partition};
use crate::vfs::{
    components, split_parent, DirEntry, FileAttr, FileKind, FlashFs, FsKind, GcProgress, InodeId,
    ROOT_INODE,
};
use crate::wire::{pad_to, Dec, Enc};

pub const CHECKPOINT_BLOCKS: u32 = 4;
pub const MIN_BLOCKS: u32 = 12;
/// Blocks kept back so the collector can always evacuate a victim.
const RESERVE_BLOCKS: usize = 2;
/// Parent recorded in the header of an object being deleted.
const UNLINKED_DIR: u32 = 3;
const FIRST_OBJECT_ID: u32 = 256;
const TAGS_OFFSET: usize = 2;
const HEADER_MAGIC: u32 = 0x5948_4452;
const CHECKPOINT_MAGIC: u32 = 0x5943_4B50;

const FLAG_NORMAL: u8 = 0;
const FLAG_UNLINKED: u8 = 1;
const FLAG_DELETED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Yaffs2Config {
    /// Threshold GC runs while fewer empty blocks than this remain.
    pub gc_free_threshold: usize,
    /// Write a checkpoint at unmount.
    pub checkpoint: bool,
}

impl Default for Yaffs2Config {
    fn default() -> Self {
        Self {
            gc_free_threshold: 6,
            checkpoint: true,
        }
    }
}

/// How the last mount rebuilt its tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MountSource {
    Scan,
    Checkpoint,
}

/// OOB tags. Header chunks also carry parent, kind, flags and size so the
/// scan can rebuild the tree without reading page data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tags {
    obj: u32,
    chunk: u32,
    seq: u32,
    byte_count: u16,
    parent: u32,
    kind: u8,
    flags: u8,
    size: u64,
}

impl Tags {
    fn encode(&self, oob_len: usize) -> Vec<u8> {
        let mut e = Enc::new();
        e.u32(self.obj)
            .u32(self.chunk)
            .u32(self.seq)
            .u16(self.byte_count);
        let mut ext = Enc::new();
        ext.u32(self.parent).u8(self.kind).u8(self.flags).u64(self.size);
        let mut crc = crc32fast::Hasher::new();
        crc.update(&e.buf);
        crc.update(&ext.buf);
        let crc = (crc.finalize() & 0xFFFF) as u16;
        e.u16(crc).bytes(&ext.buf);
        let mut oob = vec![0xFF; oob_len];
        oob[TAGS_OFFSET..TAGS_OFFSET + e.len()].copy_from_slice(&e.buf);
        oob
    }

    fn decode(oob: &[u8]) -> Option<Self> {
        let raw = oob.get(TAGS_OFFSET..TAGS_OFFSET + 30)?;
        let mut d = Dec::new(raw);
        let obj = d.u32().ok()?;
        let chunk = d.u32().ok()?;
        let seq = d.u32().ok()?;
        let byte_count = d.u16().ok()?;
        let crc = d.u16().ok()?;
        let parent = d.u32().ok()?;
        let kind = d.u8().ok()?;
        let flags = d.u8().ok()?;
        let size = d.u64().ok()?;
        let mut h = crc32fast::Hasher::new();
        h.update(&raw[..14]);
        h.update(&raw[16..30]);
        if (h.finalize() & 0xFFFF) as u16 != crc {
            return None;
        }
        Some(Self {
            obj,
            chunk,
            seq,
            byte_count,
            parent,
            kind,
            flags,
            size,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PageMeta {
    /// 0 when the page is erased.
    obj: u32,
    chunk: u32,
    valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Empty,
    Allocating,
    Full,
    Bad,
}

impl BlockState {
    fn code(self) -> u8 {
        match self {
            BlockState::Empty => 0,
            BlockState::Allocating => 1,
            BlockState::Full => 2,
            BlockState::Bad => 3,
        }
    }

    fn from_code(c: u8) -> FsResult<Self> {
        Ok(match c {
            0 => BlockState::Empty,
            1 => BlockState::Allocating,
            2 => BlockState::Full,
            3 => BlockState::Bad,
            _ => return Err(FsError::Corrupt("checkpoint block state".into())),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockMeta {
    state: BlockState,
    valid: u32,
    written: u32,
}

#[derive(Debug, Clone)]
struct Object {
    parent: u32,
    kind: FileKind,
    /// None until the header chunk has been read.
    name: Option<String>,
    size: u64,
    header: u32,
    /// chunk id -> (page, byte count)
    chunks: BTreeMap<u32, (u32, u16)>,
    children: BTreeSet<u32>,
    /// Names of all children are resident.
    names_loaded: bool,
}

impl Object {
    fn new(parent: u32, kind: FileKind, name: Option<String>, header: u32) -> Self {
        Self {
            parent,
            kind,
            name,
            size: 0,
            header,
            chunks: BTreeMap::new(),
            children: BTreeSet::new(),
            names_loaded: false,
        }
    }
}

pub struct Yaffs2 {
    chip: FlashChip,
    part: Partition,
    cfg: Yaffs2Config,
    mounted: bool,
    source: Option<MountSource>,
    data_blocks: u32,
    pages: Vec<PageMeta>,
    blocks: Vec<BlockMeta>,
    cursor: Option<u32>,
    objects: HashMap<u32, Object>,
    by_name: HashMap<(u32, String), u32>,
    /// Deleted objects whose final header is still needed on flash.
    tombstones: HashMap<u32, u32>,
    /// Pages on flash (valid or not) per object.
    on_flash: HashMap<u32, u32>,
    next_seq: u32,
    next_obj: u32,
    checkpoint_present: bool,
}

impl Yaffs2 {
    pub fn open(chip: FlashChip, part: Partition, cfg: Yaffs2Config) -> FsResult<Self> {
        if part.block_count < MIN_BLOCKS {
            return Err(FsError::PartitionTooSmall(part.block_count));
        }
        Ok(Self {
            chip,
            part,
            cfg,
            mounted: false,
            source: None,
            data_blocks: part.block_count - CHECKPOINT_BLOCKS,
            pages: Vec::new(),
            blocks: Vec::new(),
            cursor: None,
            objects: HashMap::new(),
            by_name: HashMap::new(),
            tombstones: HashMap::new(),
            on_flash: HashMap::new(),
            next_seq: 1,
            next_obj: FIRST_OBJECT_ID,
            checkpoint_present: false,
        })
    }

    /// An erased partition is an empty file system, so there is nothing to
    /// write here.
    pub fn mkfs(chip: FlashChip, part: Partition, cfg: Yaffs2Config) -> FsResult<Self> {
        Self::open(chip, part, cfg)
    }

    pub fn set_checkpoint_enabled(&mut self, on: bool) {
        self.cfg.checkpoint = on;
    }

    pub fn mount_source(&self) -> Option<MountSource> {
        self.source
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint_present
    }

    pub fn object_count(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn empty_blocks(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.state == BlockState::Empty)
            .count()
    }

    /// Number of blocks that hold at least one invalid chunk.
    pub fn blocks_with_garbage(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b.state, BlockState::Full | BlockState::Allocating) && b.valid < b.written)
            .count()
    }

    /// (object, chunk id) -> page for every valid chunk.
    pub fn chunk_map(&self) -> BTreeMap<(u32, u32), u32> {
        let mut out = BTreeMap::new();
        for (page, m) in self.pages.iter().enumerate() {
            if m.valid {
                out.insert((m.obj, m.chunk), page as u32);
            }
        }
        out
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.mounted {
            return Ok(());
        }
        let ppb = self.ppb();
        for (b, meta) in self.blocks.iter().enumerate() {
            let range = &self.pages[b * ppb as usize..(b + 1) * ppb as usize];
            let valid = range.iter().filter(|m| m.valid).count() as u32;
            if valid != meta.valid {
                return Err(format!("block {b}: valid {} != {valid}", meta.valid));
            }
            for (p, m) in range.iter().enumerate() {
                let state = self
                    .chip
                    .page_state(&self.part, b as u32 * ppb + p as u32)
                    .map_err(|e| e.to_string())?;
                let programmed = state == PageState::Programmed;
                if meta.state != BlockState::Bad && programmed != ((p as u32) < meta.written) {
                    return Err(format!("block {b} page {p}: state {state:?}, written {}", meta.written));
                }
                if m.valid && m.obj == 0 {
                    return Err(format!("block {b} page {p}: valid without owner"));
                }
            }
        }
        for (id, o) in &self.objects {
            if *id == ROOT_INODE as u32 {
                continue;
            }
            if !self.pages[o.header as usize].valid || self.pages[o.header as usize].obj != *id {
                return Err(format!("object {id}: header page {} not valid", o.header));
            }
            for (c, (p, _)) in &o.chunks {
                let m = self.pages[*p as usize];
                if !m.valid || m.obj != *id || m.chunk != *c {
                    return Err(format!("object {id} chunk {c}: page {p} mismatch"));
                }
            }
        }
        Ok(())
    }

    fn ppb(&self) -> u32 {
        self.chip.geometry().pages_per_block
    }

    fn page_bytes(&self) -> usize {
        self.chip.geometry().page_data_bytes
    }

    fn require_mounted(&self) -> FsResult<()> {
        if self.mounted {
            Ok(())
        } else {
            Err(FsError::NotMounted)
        }
    }

    fn reset_tables(&mut self) {
        let ppb = self.ppb();
        self.pages = vec![PageMeta::default(); (self.data_blocks * ppb) as usize];
        self.blocks = vec![
            BlockMeta {
                state: BlockState::Empty,
                valid: 0,
                written: 0,
            };
            self.data_blocks as usize
        ];
        self.cursor = None;
        self.objects.clear();
        self.by_name.clear();
        self.tombstones.clear();
        self.on_flash.clear();
        let root = Object::new(ROOT_INODE as u32, FileKind::Dir, Some(String::new()), 0);
        self.objects.insert(ROOT_INODE as u32, root);
    }

    // ---- chunk allocation ----

    fn next_block_after(&self, from: Option<u32>) -> Option<u32> {
        let n = self.data_blocks;
        let start = from.map(|b| b + 1).unwrap_or(0);
        (0..n)
            .map(|i| (start + i) % n)
            .find(|&b| self.blocks[b as usize].state == BlockState::Empty)
    }

    fn alloc_page(&mut self, foreground: bool) -> FsResult<u32> {
        let ppb = self.ppb();
        if let Some(b) = self.cursor {
            let meta = self.blocks[b as usize];
            if meta.state == BlockState::Allocating && meta.written < ppb {
                return Ok(b * ppb + meta.written);
            }
            if meta.state == BlockState::Allocating {
                self.blocks[b as usize].state = BlockState::Full;
            }
        }
        if foreground {
            let mut guard = self.data_blocks as usize * 2;
            while self.empty_blocks() <= RESERVE_BLOCKS {
                if guard == 0 {
                    return Err(FsError::NoSpace);
                }
                guard -= 1;
                match self.gc_pass(true) {
                    Ok(_) => {}
                    Err(FsError::NothingToCollect) => return Err(FsError::NoSpace),
                    Err(e) => return Err(e),
                }
            }
            // GC may have opened a new cursor block.
            if let Some(b) = self.cursor {
                let meta = self.blocks[b as usize];
                if meta.state == BlockState::Allocating && meta.written < ppb {
                    return Ok(b * ppb + meta.written);
                }
            }
        }
        let b = self.next_block_after(self.cursor).ok_or(FsError::NoSpace)?;
        self.blocks[b as usize].state = BlockState::Allocating;
        self.cursor = Some(b);
        Ok(b * ppb)
    }

    fn put_chunk(&mut self, mut tags: Tags, data: &[u8], foreground: bool) -> FsResult<u32> {
        let page = self.alloc_page(foreground)?;
        tags.seq = self.next_seq;
        self.next_seq += 1;
        let oob = tags.encode(self.chip.geometry().oob_bytes);
        let data = pad_to(data, self.page_bytes());
        self.chip.program_page(&self.part, page, &data, &oob)?;
        let b = (page / self.ppb()) as usize;
        self.blocks[b].written += 1;
        self.blocks[b].valid += 1;
        self.pages[page as usize] = PageMeta {
            obj: tags.obj,
            chunk: tags.chunk,
            valid: true,
        };
        *self.on_flash.entry(tags.obj).or_default() += 1;
        Ok(page)
    }

    /// Marks a chunk stale. Charged as one OOB read when `charge` is set.
    fn invalidate(&mut self, page: u32, charge: bool) -> FsResult<()> {
        if charge {
            self.chip.read_page(&self.part, page)?;
        }
        let m = &mut self.pages[page as usize];
        if !m.valid {
            return Ok(());
        }
        m.valid = false;
        let b = page / self.ppb();
        let meta = &mut self.blocks[b as usize];
        meta.valid -= 1;
        if meta.valid == 0 && meta.state == BlockState::Full {
            self.erase(b)?;
        }
        Ok(())
    }

    fn erase(&mut self, b: u32) -> FsResult<()> {
        let ppb = self.ppb();
        let mut owners = Vec::new();
        for p in b * ppb..(b + 1) * ppb {
            let m = std::mem::take(&mut self.pages[p as usize]);
            if m.obj != 0 {
                owners.push(m.obj);
            }
        }
        let result = self.chip.erase_block(&self.part, b);
        self.blocks[b as usize] = BlockMeta {
            state: BlockState::Empty,
            valid: 0,
            written: 0,
        };
        if self.cursor == Some(b) {
            self.cursor = None;
        }
        match result {
            Ok(()) => {}
            Err(FlashError::BlockWornOut(_)) => self.blocks[b as usize].state = BlockState::Bad,
            Err(e) => return Err(e.into()),
        }
        for obj in owners {
            let n = self.on_flash.get_mut(&obj).expect("owner count");
            *n -= 1;
            let n = *n;
            if n == 0 {
                self.on_flash.remove(&obj);
            }
            if n == 1 {
                if let Some(&tomb) = self.tombstones.get(&obj) {
                    self.tombstones.remove(&obj);
                    self.invalidate(tomb, false)?;
                }
            }
        }
        Ok(())
    }

    // ---- garbage collection ----

    fn gc_pass(&mut self, threshold_only: bool) -> FsResult<GcProgress> {
        let ppb = self.ppb();
        let mut victim: Option<(u32, u32)> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.state != BlockState::Full {
                continue;
            }
            if victim.map(|(_, v)| b.valid < v).unwrap_or(true) {
                victim = Some((i as u32, b.valid));
            }
        }
        let Some((victim, valid)) = victim else {
            return Err(FsError::NothingToCollect);
        };
        if valid == 0 {
            self.erase(victim)?;
            return Ok(GcProgress {
                victim,
                copied: 0,
                erased: 1,
                clean_pick: false,
            });
        }
        let below = self.empty_blocks() < self.cfg.gc_free_threshold;
        if (!below && !threshold_only) || valid == ppb {
            return Err(FsError::NothingToCollect);
        }
        let mut copied = 0;
        for p in victim * ppb..(victim + 1) * ppb {
            if !self.pages[p as usize].valid {
                continue;
            }
            let page = self.chip.read_page(&self.part, p)?;
            let data = page.data.to_vec();
            let tags = Tags::decode(page.oob).ok_or_else(|| FsError::Corrupt("tags".into()))?;
            let new = self.put_chunk(tags, &data, false)?;
            self.relocate(tags.obj, tags.chunk, p, new);
            let meta = &mut self.pages[p as usize];
            meta.valid = false;
            self.blocks[victim as usize].valid -= 1;
            copied += 1;
        }
        self.erase(victim)?;
        Ok(GcProgress {
            victim,
            copied,
            erased: 1,
            clean_pick: false,
        })
    }

    fn relocate(&mut self, obj: u32, chunk: u32, old: u32, new: u32) {
        if let Some(t) = self.tombstones.get_mut(&obj) {
            if *t == old {
                *t = new;
            }
            return;
        }
        let Some(o) = self.objects.get_mut(&obj) else {
            return;
        };
        if chunk == 0 {
            o.header = new;
        } else if let Some(e) = o.chunks.get_mut(&chunk) {
            e.0 = new;
        }
    }

    /// Threshold GC at operation boundaries.
    fn background_gc(&mut self) -> FsResult<()> {
        for _ in 0..16 {
            if self.empty_blocks() >= self.cfg.gc_free_threshold {
                break;
            }
            match self.gc_pass(false) {
                Ok(_) => {}
                Err(FsError::NothingToCollect) | Err(FsError::NoSpace) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn tick<T>(&mut self, r: FsResult<T>) -> FsResult<T> {
        let v = r?;
        self.background_gc()?;
        Ok(v)
    }

    // ---- checkpoint ----

    fn checkpoint_first_block(&self) -> u32 {
        self.data_blocks
    }

    /// The first mutation after mount makes the checkpoint stale.
    fn invalidate_checkpoint(&mut self) -> FsResult<()> {
        if !self.checkpoint_present {
            return Ok(());
        }
        self.erase_checkpoint_area()?;
        self.checkpoint_present = false;
        Ok(())
    }

    fn erase_checkpoint_area(&mut self) -> FsResult<()> {
        let ppb = self.ppb();
        for b in self.checkpoint_first_block()..self.part.block_count {
            if self.chip.is_bad(&self.part, b)? {
                continue;
            }
            if self.chip.page_state(&self.part, b * ppb)? == PageState::Programmed {
                match self.chip.erase_block(&self.part, b) {
                    Ok(()) | Err(FlashError::BlockWornOut(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    fn encode_checkpoint(&mut self) -> FsResult<Vec<u8>> {
        let mut ids: Vec<u32> = self.objects.keys().copied().collect();
        ids.sort_unstable();
        // Names must be resident before they can be saved.
        for &id in &ids {
            if self.objects[&id].name.is_none() {
                self.load_name(id)?;
            }
        }
        let mut e = Enc::new();
        e.u32(self.next_seq)
            .u32(self.next_obj)
            .u32(self.cursor.unwrap_or(u32::MAX));
        for b in &self.blocks {
            e.u8(b.state.code()).u16(b.valid as u16).u16(b.written as u16);
        }
        for m in &self.pages {
            e.u32(m.obj).u32(m.chunk).u8(m.valid as u8);
        }
        e.u32(ids.len() as u32 - 1);
        for id in ids.into_iter().filter(|&i| i != ROOT_INODE as u32) {
            let o = &self.objects[&id];
            e.u32(id)
                .u32(o.parent)
                .u8(o.kind.code())
                .u64(o.size)
                .u32(o.header)
                .str(o.name.as_deref().unwrap_or_default())
                .u32(o.chunks.len() as u32);
            for (c, (p, n)) in &o.chunks {
                e.u32(*c).u32(*p).u16(*n);
            }
        }
        e.u32(self.tombstones.len() as u32);
        let mut tombs: Vec<_> = self.tombstones.iter().collect();
        tombs.sort_unstable();
        for (obj, page) in tombs {
            e.u32(*obj).u32(*page);
        }
        Ok(encode_container(Codec::Deflate, &e.finish()))
    }

    fn write_checkpoint(&mut self) -> FsResult<()> {
        let body = self.encode_checkpoint()?;
        let mut stream = Enc::new();
        stream.u32(CHECKPOINT_MAGIC).u32(body.len() as u32).bytes(&body);
        let stream = stream.finish();
        let ppb = self.ppb();
        let capacity = (CHECKPOINT_BLOCKS * ppb) as usize * self.page_bytes();
        if stream.len() > capacity {
            return Ok(());
        }
        self.erase_checkpoint_area()?;
        let first = self.checkpoint_first_block();
        for b in first..self.part.block_count {
            if self.chip.is_bad(&self.part, b)? {
                return Ok(());
            }
        }
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        let page_bytes = self.page_bytes();
        for (i, chunk) in stream.chunks(page_bytes).enumerate() {
            let data = pad_to(chunk, page_bytes);
            self.chip
                .program_page(&self.part, first * ppb + i as u32, &data, &oob)?;
        }
        self.checkpoint_present = true;
        Ok(())
    }

    /// Reads the checkpoint; `Ok(None)` when there is none. The first page
    /// has already been read by the caller.
    fn read_checkpoint(&mut self, first_page: &[u8]) -> FsResult<Option<Vec<u8>>> {
        let mut d = Dec::new(first_page);
        if d.u32()? != CHECKPOINT_MAGIC {
            return Ok(None);
        }
        let len = d.u32()? as usize;
        let total = 8 + len;
        let ppb = self.ppb();
        let page_bytes = self.page_bytes();
        let pages = total.div_ceil(page_bytes) as u32;
        if pages > CHECKPOINT_BLOCKS * ppb {
            return Ok(None);
        }
        let start = self.checkpoint_first_block() * ppb;
        let mut stream = first_page.to_vec();
        for p in 1..pages {
            stream.extend_from_slice(self.chip.read_page(&self.part, start + p)?.data);
        }
        match decode_container(&stream[8..total]) {
            Ok((body, _)) => Ok(Some(body)),
            Err(_) => Ok(None),
        }
    }

    fn restore_checkpoint(&mut self, body: &[u8]) -> FsResult<()> {
        self.reset_tables();
        let mut d = Dec::new(body);
        self.next_seq = d.u32()?;
        self.next_obj = d.u32()?;
        let cursor = d.u32()?;
        self.cursor = (cursor != u32::MAX).then_some(cursor);
        for b in self.blocks.iter_mut() {
            b.state = BlockState::from_code(d.u8()?)?;
            b.valid = d.u16()? as u32;
            b.written = d.u16()? as u32;
        }
        for m in self.pages.iter_mut() {
            m.obj = d.u32()?;
            m.chunk = d.u32()?;
            m.valid = d.u8()? != 0;
            if m.obj != 0 {
                *self.on_flash.entry(m.obj).or_default() += 1;
            }
        }
        let n = d.u32()?;
        for _ in 0..n {
            let id = d.u32()?;
            let parent = d.u32()?;
            let kind = FileKind::from_code(d.u8()?)
                .ok_or_else(|| FsError::Corrupt("checkpoint object kind".into()))?;
            let size = d.u64()?;
            let header = d.u32()?;
            let name = d.str()?;
            let mut o = Object::new(parent, kind, Some(name.clone()), header);
            o.size = size;
            o.names_loaded = true;
            for _ in 0..d.u32()? {
                let c = d.u32()?;
                let p = d.u32()?;
                let n = d.u16()?;
                o.chunks.insert(c, (p, n));
            }
            self.objects.insert(id, o);
            self.by_name.insert((parent, name), id);
        }
        let links: Vec<(u32, u32)> = self
            .objects
            .iter()
            .filter(|(id, _)| **id != ROOT_INODE as u32)
            .map(|(id, o)| (o.parent, *id))
            .collect();
        for (parent, id) in links {
            self.objects
                .get_mut(&parent)
                .ok_or_else(|| FsError::Corrupt("checkpoint parent".into()))?
                .children
                .insert(id);
        }
        for _ in 0..d.u32()? {
            let obj = d.u32()?;
            let page = d.u32()?;
            self.tombstones.insert(obj, page);
        }
        Ok(())
    }

    // ---- scan ----

    fn scan(&mut self, skip: u32) -> FsResult<()> {
        self.reset_tables();
        let ppb = self.ppb();
        let mut records: Vec<(u32, Tags)> = Vec::new();
        for b in 0..self.part.block_count {
            if self.chip.is_bad(&self.part, b)? {
                if b < self.data_blocks {
                    self.blocks[b as usize].state = BlockState::Bad;
                }
                continue;
            }
            for p in b * ppb..(b + 1) * ppb {
                if p == skip {
                    continue;
                }
                let page = self.chip.read_page(&self.part, p)?;
                if b >= self.data_blocks || page.state == PageState::Erased {
                    continue;
                }
                let tags = Tags::decode(page.oob);
                let meta = &mut self.blocks[b as usize];
                meta.written = meta.written.max(p % ppb + 1);
                meta.state = BlockState::Full;
                match tags {
                    Some(t) => {
                        self.pages[p as usize] = PageMeta {
                            obj: t.obj,
                            chunk: t.chunk,
                            valid: false,
                        };
                        *self.on_flash.entry(t.obj).or_default() += 1;
                        records.push((p, t));
                    }
                    None => {
                        // Torn or foreign page: dead space until erased.
                        self.pages[p as usize] = PageMeta {
                            obj: u32::MAX,
                            chunk: 0,
                            valid: false,
                        };
                        *self.on_flash.entry(u32::MAX).or_default() += 1;
                    }
                }
            }
        }
        records.sort_by_key(|(_, t)| t.seq);
        let mut max_seq = 0;
        let mut max_obj = FIRST_OBJECT_ID - 1;
        let mut headers: HashMap<u32, (u32, Tags)> = HashMap::new();
        let mut chunks: HashMap<(u32, u32), (u32, Tags)> = HashMap::new();
        for (p, t) in &records {
            max_seq = max_seq.max(t.seq);
            max_obj = max_obj.max(t.obj);
            if t.chunk == 0 {
                headers.insert(t.obj, (*p, *t));
            } else {
                chunks.insert((t.obj, t.chunk), (*p, *t));
            }
        }
        self.next_seq = max_seq + 1;
        self.next_obj = max_obj + 1;

        // Live objects: newest header is normal and the parent chain reaches the root.
        let mut ids: Vec<u32> = headers.keys().copied().collect();
        ids.sort_unstable();
        let mut live: HashMap<u32, bool> = HashMap::new();
        fn is_live(
            id: u32,
            headers: &HashMap<u32, (u32, Tags)>,
            live: &mut HashMap<u32, bool>,
            depth: usize,
        ) -> bool {
            if id == ROOT_INODE as u32 {
                return true;
            }
            if let Some(v) = live.get(&id) {
                return *v;
            }
            let v = match headers.get(&id) {
                Some((_, t)) if t.flags == FLAG_NORMAL && depth < 4096 => {
                    t.kind == FileKind::Dir.code() || t.kind == FileKind::File.code()
                }
                _ => false,
            } && {
                let parent = headers[&id].1.parent;
                parent != id
                    && (parent == ROOT_INODE as u32
                        || (headers.get(&parent).map(|(_, t)| t.kind == FileKind::Dir.code()) == Some(true)
                            && is_live(parent, headers, live, depth + 1)))
            };
            live.insert(id, v);
            v
        }
        for &id in &ids {
            is_live(id, &headers, &mut live, 0);
        }
        for &id in &ids {
            let (page, t) = headers[&id];
            if live[&id] {
                let kind = FileKind::from_code(t.kind).expect("checked kind");
                let mut o = Object::new(t.parent, kind, None, page);
                o.size = t.size;
                self.objects.insert(id, o);
                self.mark_valid(page);
            } else if t.flags != FLAG_NORMAL && self.on_flash.get(&id).copied().unwrap_or(0) > 1 {
                self.tombstones.insert(id, page);
                self.mark_valid(page);
            }
        }
        for &id in &ids {
            if live[&id] {
                let parent = self.objects[&id].parent;
                self.objects.get_mut(&parent).expect("live parent").children.insert(id);
            }
        }
        let mut keys: Vec<(u32, u32)> = chunks.keys().copied().collect();
        keys.sort_unstable();
        let page_bytes = self.page_bytes() as u64;
        for key in keys {
            let (page, t) = chunks[&key];
            let Some(o) = self.objects.get_mut(&key.0) else {
                continue;
            };
            if o.kind != FileKind::File {
                continue;
            }
            let start = (key.1 as u64 - 1) * page_bytes;
            if start >= o.size {
                continue;
            }
            o.chunks.insert(key.1, (page, t.byte_count));
            self.mark_valid(page);
        }
        // The block holding the newest chunk resumes as the cursor.
        if let Some((p, _)) = records.last() {
            let b = p / ppb;
            if self.blocks[b as usize].written < ppb {
                self.blocks[b as usize].state = BlockState::Allocating;
                self.cursor = Some(b);
            }
        }
        Ok(())
    }

    fn mark_valid(&mut self, page: u32) {
        let ppb = self.ppb();
        let m = &mut self.pages[page as usize];
        if !m.valid {
            m.valid = true;
            self.blocks[(page / ppb) as usize].valid += 1;
        }
    }

    // ---- namespace ----

    fn load_name(&mut self, id: u32) -> FsResult<()> {
        let header = self.objects[&id].header;
        let page = self.chip.read_page(&self.part, header)?;
        let mut d = Dec::new(page.data);
        if d.u32()? != HEADER_MAGIC {
            return Err(FsError::Corrupt(format!("object {id}: bad header")));
        }
        d.u8()?;
        d.u32()?;
        let name = d.str()?;
        let o = self.objects.get_mut(&id).expect("object");
        self.by_name.insert((o.parent, name.clone()), id);
        o.name = Some(name);
        Ok(())
    }

    fn ensure_names(&mut self, dir: u32) -> FsResult<()> {
        let o = &self.objects[&dir];
        if o.names_loaded {
            return Ok(());
        }
        let pending: Vec<u32> = o
            .children
            .iter()
            .copied()
            .filter(|c| self.objects[c].name.is_none())
            .collect();
        for id in pending {
            self.load_name(id)?;
        }
        self.objects.get_mut(&dir).expect("dir").names_loaded = true;
        Ok(())
    }

    fn lookup_in(&mut self, dir: u32, name: &str) -> FsResult<Option<u32>> {
        self.ensure_names(dir)?;
        Ok(self.by_name.get(&(dir, name.to_string())).copied())
    }

    fn resolve_parts(&mut self, parts: &[&str], full: &str) -> FsResult<u32> {
        let mut cur = ROOT_INODE as u32;
        for name in parts {
            if self.objects[&cur].kind != FileKind::Dir {
                return Err(FsError::NotADirectory(full.to_string()));
            }
            cur = self
                .lookup_in(cur, name)?
                .ok_or_else(|| FsError::NotFound(full.to_string()))?;
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
        if self.objects[&dir].kind != FileKind::Dir {
            return Err(FsError::NotADirectory(path.to_string()));
        }
        Ok((dir, name.to_string()))
    }

    fn header_data(kind: FileKind, parent: u32, name: &str, size: u64, flags: u8) -> Vec<u8> {
        let mut e = Enc::new();
        e.u32(HEADER_MAGIC)
            .u8(kind.code())
            .u32(parent)
            .str(name)
            .u64(size)
            .u8(flags);
        e.finish()
    }

    #[allow(clippy::too_many_arguments)]
    fn write_header(
        &mut self,
        id: u32,
        kind: FileKind,
        parent: u32,
        name: &str,
        size: u64,
        flags: u8,
        foreground: bool,
    ) -> FsResult<u32> {
        let tags = Tags {
            obj: id,
            chunk: 0,
            seq: 0,
            byte_count: 0,
            parent,
            kind: kind.code(),
            flags,
            size,
        };
        let data = Self::header_data(kind, parent, name, size, flags);
        self.put_chunk(tags, &data, foreground)
    }

    fn create_object(&mut self, path: &str, kind: FileKind) -> FsResult<InodeId> {
        let (parent, name) = self.resolve_parent(path)?;
        if self.lookup_in(parent, &name)?.is_some() {
            return Err(FsError::Exists(path.to_string()));
        }
        self.invalidate_checkpoint()?;
        let id = self.next_obj;
        self.next_obj += 1;
        let header = self.write_header(id, kind, parent, &name, 0, FLAG_NORMAL, true)?;
        let mut o = Object::new(parent, kind, Some(name.clone()), header);
        o.names_loaded = true;
        self.objects.insert(id, o);
        self.objects.get_mut(&parent).expect("parent").children.insert(id);
        self.by_name.insert((parent, name), id);
        Ok(id as InodeId)
    }

    fn remove_object(&mut self, path: &str, kind: FileKind) -> FsResult<()> {
        let (parent, name) = self.resolve_parent(path)?;
        let id = self
            .lookup_in(parent, &name)?
            .ok_or_else(|| FsError::NotFound(path.to_string()))?;
        let o = &self.objects[&id];
        match (kind, o.kind) {
            (FileKind::File, FileKind::Dir) => return Err(FsError::IsADirectory(path.to_string())),
            (FileKind::Dir, FileKind::File) => return Err(FsError::NotADirectory(path.to_string())),
            _ => {}
        }
        if !o.children.is_empty() {
            return Err(FsError::NotEmpty(path.to_string()));
        }
        self.invalidate_checkpoint()?;
        let o = self.objects.remove(&id).expect("object");
        self.objects.get_mut(&parent).expect("parent").children.remove(&id);
        self.by_name.remove(&(parent, name.clone()));
        let mut last = o.header;
        if !o.chunks.is_empty() {
            // Files with data are first moved to the unlinked directory.
            let h = self.write_header(id, o.kind, UNLINKED_DIR, &name, o.size, FLAG_UNLINKED, false)?;
            self.invalidate(last, true)?;
            last = h;
        }
        let tomb = self.write_header(id, o.kind, UNLINKED_DIR, &name, 0, FLAG_DELETED, false)?;
        self.tombstones.insert(id, tomb);
        self.invalidate(last, true)?;
        for (page, _) in o.chunks.values() {
            self.invalidate(*page, true)?;
        }
        if self.on_flash.get(&id).copied().unwrap_or(0) <= 1 && self.tombstones.remove(&id).is_some() {
            self.invalidate(tomb, false)?;
        }
        Ok(())
    }

    fn write_data(&mut self, id: u32, offset: u64, data: &[u8]) -> FsResult<()> {
        if data.is_empty() {
            return Ok(());
        }
        self.invalidate_checkpoint()?;
        let pb = self.page_bytes() as u64;
        let end = offset + data.len() as u64;
        for ci in offset / pb..end.div_ceil(pb) {
            let chunk = ci as u32 + 1;
            let cstart = ci * pb;
            let a = offset.max(cstart) - cstart;
            let b = end.min(cstart + pb) - cstart;
            let old = self.objects[&id].chunks.get(&chunk).copied();
            let mut buf = Vec::with_capacity(pb as usize);
            if let Some((page, n)) = old {
                if a > 0 || b < n as u64 {
                    buf.extend_from_slice(&self.chip.read_page(&self.part, page)?.data[..n as usize]);
                }
            }
            if (buf.len() as u64) < b {
                buf.resize(b as usize, 0);
            }
            let src = (cstart + a - offset) as usize;
            buf[a as usize..b as usize].copy_from_slice(&data[src..src + (b - a) as usize]);
            let tags = Tags {
                obj: id,
                chunk,
                seq: 0,
                byte_count: buf.len() as u16,
                parent: 0,
                kind: 0,
                flags: 0,
                size: 0,
            };
            let page = self.put_chunk(tags, &buf, true)?;
            self.objects
                .get_mut(&id)
                .expect("object")
                .chunks
                .insert(chunk, (page, buf.len() as u16));
            if let Some((old_page, _)) = old {
                self.invalidate(old_page, true)?;
            }
        }
        let o = &self.objects[&id];
        let size = o.size.max(end);
        let (kind, parent, old_header) = (o.kind, o.parent, o.header);
        if o.name.is_none() {
            self.load_name(id)?;
        }
        let name = self.objects[&id].name.clone().expect("name");
        let header = self.write_header(id, kind, parent, &name, size, FLAG_NORMAL, true)?;
        let o = self.objects.get_mut(&id).expect("object");
        o.header = header;
        o.size = size;
        self.invalidate(old_header, true)?;
        Ok(())
    }

    fn read_data(&mut self, id: u32) -> FsResult<Vec<u8>> {
        let o = &self.objects[&id];
        let mut out = vec![0u8; o.size as usize];
        let chunks: Vec<(u32, (u32, u16))> = o.chunks.iter().map(|(c, v)| (*c, *v)).collect();
        let pb = self.page_bytes();
        for (c, (page, n)) in chunks {
            let start = (c as usize - 1) * pb;
            let n = (n as usize).min(out.len().saturating_sub(start));
            let data = self.chip.read_page(&self.part, page)?.data;
            out[start..start + n].copy_from_slice(&data[..n]);
        }
        Ok(out)
    }
}

impl FlashFs for Yaffs2 {
    fn kind(&self) -> FsKind {
        FsKind::Yaffs2
    }

    /// Restores from the checkpoint when one is present; otherwise reads
    /// every page of the partition.
    fn mount(&mut self) -> FsResult<()> {
        if self.mounted {
            return Err(FsError::AlreadyMounted);
        }
        let ppb = self.ppb();
        let probe = self.checkpoint_first_block() * ppb;
        let mut restored = false;
        if !self.chip.is_bad(&self.part, self.checkpoint_first_block())? {
            let first = self.chip.read_page(&self.part, probe)?.data.to_vec();
            if let Some(body) = self.read_checkpoint(&first)? {
                restored = self.restore_checkpoint(&body).is_ok();
            }
        }
        if restored {
            self.checkpoint_present = true;
            self.source = Some(MountSource::Checkpoint);
        } else {
            self.scan(probe)?;
            self.checkpoint_present = false;
            self.source = Some(MountSource::Scan);
        }
        self.mounted = true;
        Ok(())
    }

    fn unmount(&mut self) -> FsResult<()> {
        self.require_mounted()?;
        if self.cfg.checkpoint && !self.checkpoint_present {
            self.write_checkpoint()?;
        }
        self.mounted = false;
        self.pages.clear();
        self.blocks.clear();
        self.objects.clear();
        self.by_name.clear();
        self.tombstones.clear();
        self.on_flash.clear();
        self.cursor = None;
        Ok(())
    }

    fn is_mounted(&self) -> bool {
        self.mounted
    }

    fn create_file(&mut self, path: &str) -> FsResult<InodeId> {
        let r = self.create_object(path, FileKind::File);
        self.tick(r)
    }

    fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> FsResult<()> {
        let r = (|| {
            let id = self.resolve(path)?;
            if self.objects[&id].kind != FileKind::File {
                return Err(FsError::IsADirectory(path.to_string()));
            }
            self.write_data(id, offset, data)
        })();
        self.tick(r)
    }

    fn read_file(&mut self, path: &str) -> FsResult<Vec<u8>> {
        let id = self.resolve(path)?;
        if self.objects[&id].kind != FileKind::File {
            return Err(FsError::IsADirectory(path.to_string()));
        }
        self.read_data(id)
    }

    fn delete_file(&mut self, path: &str) -> FsResult<()> {
        let r = self.remove_object(path, FileKind::File);
        self.tick(r)
    }

    fn mkdir(&mut self, path: &str) -> FsResult<InodeId> {
        let r = self.create_object(path, FileKind::Dir);
        self.tick(r)
    }

    fn rmdir(&mut self, path: &str) -> FsResult<()> {
        if components(path)?.is_empty() {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        let r = self.remove_object(path, FileKind::Dir);
        self.tick(r)
    }

    fn readdir(&mut self, path: &str) -> FsResult<Vec<DirEntry>> {
        let id = self.resolve(path)?;
        if self.objects[&id].kind != FileKind::Dir {
            return Err(FsError::NotADirectory(path.to_string()));
        }
        self.ensure_names(id)?;
        let mut out: Vec<DirEntry> = self.objects[&id]
            .children
            .iter()
            .map(|c| {
                let o = &self.objects[c];
                DirEntry {
                    name: o.name.clone().expect("loaded"),
                    kind: o.kind,
                    inode: *c as InodeId,
                }
            })
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    fn stat(&mut self, path: &str) -> FsResult<FileAttr> {
        let id = self.resolve(path)?;
        let o = &self.objects[&id];
        Ok(FileAttr {
            kind: o.kind,
            size: if o.kind == FileKind::File { o.size } else { 0 },
            inode: id as InodeId,
        })
    }

    fn gc_step(&mut self) -> FsResult<GcProgress> {
        self.require_mounted()?;
        let has_garbage = self
            .blocks
            .iter()
            .any(|b| b.state == BlockState::Full && b.valid == 0)
            || self.empty_blocks() < self.cfg.gc_free_threshold;
        if has_garbage {
            self.invalidate_checkpoint()?;
        }
        self.gc_pass(false)
    }

    fn meta_ram_bytes(&self) -> u64 {
        let names: usize = self.by_name.keys().map(|k| k.1.len()).sum();
        let chunks: usize = self.objects.values().map(|o| o.chunks.len()).sum();
        (self.objects.len() * 48 + names + chunks * 8 + self.blocks.len() * 12 + self.pages.len() / 8)
            as u64
    }

    fn used_flash_bytes(&self) -> u64 {
        let valid: u64 = self.blocks.iter().map(|b| b.valid as u64).sum();
        valid * self.page_bytes() as u64
    }

    fn free_bytes(&self) -> u64 {
        let ppb = self.ppb() as u64;
        let pb = self.page_bytes() as u64;
        let empty = self.empty_blocks().saturating_sub(RESERVE_BLOCKS + 1) as u64;
        let cursor = self
            .cursor
            .map(|b| ppb - self.blocks[b as usize].written as u64)
            .unwrap_or(0);
        let garbage: u64 = self
            .blocks
            .iter()
            .filter(|b| b.state == BlockState::Full)
            .map(|b| (b.written - b.valid) as u64)
            .sum();
        // Each data chunk also needs its share of a header rewrite.
        (empty * ppb + cursor + garbage) * pb
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

    fn fresh(blocks: u32) -> Yaffs2 {
        let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
        let part = chip.full_partition();
        let mut fs = Yaffs2::mkfs(chip, part, Yaffs2Config::default()).unwrap();
        fs.mount().unwrap();
        fs
    }

    #[test]
    fn first_mount_reads_every_page() {
        let chip = FlashChip::new(FlashGeometry::with_blocks(800)).unwrap();
        let part = chip.full_partition();
        let mut fs = Yaffs2::mkfs(chip, part, Yaffs2Config::default()).unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.chip().counters().reads, 51_200);
        assert_eq!(fs.chip().elapsed(), 1_280_000);
        assert_eq!(fs.mount_source(), Some(MountSource::Scan));
        assert!(fs.readdir("/").unwrap().is_empty());
    }

    #[test]
    fn checkpoint_mount_is_much_faster() {
        let mut fs = fresh(800);
        let t0 = fs.chip().elapsed();
        for i in 0..50 {
            fs.create_file(&format!("/f{i}")).unwrap();
        }
        fs.unmount().unwrap();
        assert!(fs.has_checkpoint());
        let t = fs.chip().elapsed();
        fs.mount().unwrap();
        assert_eq!(fs.mount_source(), Some(MountSource::Checkpoint));
        assert!((fs.chip().elapsed() - t) * 10 < t0.max(1_280_000));
        assert_eq!(fs.readdir("/").unwrap().len(), 50);
        fs.create_file("/g").unwrap();
        assert!(!fs.has_checkpoint());
        fs.check_invariants().unwrap();
    }

    #[test]
    fn create_is_one_page() {
        let mut fs = fresh(16);
        let w = fs.chip().counters().writes;
        fs.create_file("/a").unwrap();
        assert_eq!(fs.chip().counters().writes - w, 1);
        assert!(matches!(fs.create_file("/a"), Err(FsError::Exists(_))));
    }

    #[test]
    fn write_13k_is_seven_chunks_and_a_header() {
        let mut fs = fresh(16);
        fs.create_file("/a").unwrap();
        let w = fs.chip().counters().writes;
        let data: Vec<u8> = (0..13_312u32).map(|i| i as u8).collect();
        fs.write_file("/a", 0, &data).unwrap();
        assert_eq!(fs.chip().counters().writes - w, 8);
        assert_eq!(fs.read_file("/a").unwrap(), data);
    }

    #[test]
    fn small_file_chunk_records_byte_count() {
        let mut fs = fresh(16);
        fs.create_file("/a").unwrap();
        fs.write_file("/a", 0, &[5u8; 750]).unwrap();
        let id = fs.resolve("/a").unwrap();
        assert_eq!(fs.objects[&id].chunks[&1].1, 750);
        assert_eq!(fs.stat("/a").unwrap().size, 750);
    }

    #[test]
    fn rewrite_keeps_one_valid_version() {
        let mut fs = fresh(16);
        fs.create_file("/a").unwrap();
        fs.write_file("/a", 0, &[1u8; 100]).unwrap();
        fs.write_file("/a", 10, &[2u8; 10]).unwrap();
        let id = fs.resolve("/a").unwrap();
        let chunks: Vec<_> = fs.chunk_map().into_keys().filter(|(o, _)| *o == id).collect();
        assert_eq!(chunks, vec![(id, 0), (id, 1)]);
        let mut expect = vec![1u8; 100];
        expect[10..20].fill(2);
        assert_eq!(fs.read_file("/a").unwrap(), expect);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn delete_and_rescan() {
        let mut fs = fresh(16);
        fs.set_checkpoint_enabled(false);
        fs.mkdir("/d").unwrap();
        fs.create_file("/d/a").unwrap();
        fs.write_file("/d/a", 0, &[1u8; 5000]).unwrap();
        fs.create_file("/d/empty").unwrap();
        let w = fs.chip().counters().writes;
        fs.delete_file("/d/empty").unwrap();
        assert_eq!(fs.chip().counters().writes - w, 1);
        fs.delete_file("/d/a").unwrap();
        assert!(fs.rmdir("/").is_err());
        fs.unmount().unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.mount_source(), Some(MountSource::Scan));
        assert!(fs.readdir("/d").unwrap().is_empty());
        fs.rmdir("/d").unwrap();
        fs.unmount().unwrap();
        fs.mount().unwrap();
        assert!(fs.readdir("/").unwrap().is_empty());
        fs.check_invariants().unwrap();
    }

    #[test]
    fn overwriting_a_whole_block_erases_it_inline() {
        let mut fs = fresh(16);
        fs.create_file("/a").unwrap();
        // Fill block 0: one header chunk plus data, then supersede it all.
        let data = vec![7u8; 2048 * 31];
        fs.write_file("/a", 0, &data).unwrap();
        fs.write_file("/a", 0, &data).unwrap();
        assert!(fs.blocks[0].state == BlockState::Full);
        let e = fs.chip().counters().erases;
        fs.write_file("/a", 0, &data).unwrap();
        assert!(fs.chip().counters().erases > e);
        assert_eq!(fs.blocks[0].state, BlockState::Empty);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn no_garbage_means_nothing_to_collect() {
        let mut fs = fresh(16);
        fs.create_file("/a").unwrap();
        assert_eq!(fs.gc_step(), Err(FsError::NothingToCollect));
    }

    #[test]
    fn threshold_gc_cost() {
        let mut fs = fresh(16);
        fs.cfg.gc_free_threshold = 0;
        // Block 0: 64 one-chunk files, then delete all but three.
        for i in 0..64 {
            fs.create_file(&format!("/f{i}")).unwrap();
        }
        for i in 3..64 {
            fs.delete_file(&format!("/f{i}")).unwrap();
        }
        assert_eq!(fs.blocks[0].valid, 3);
        fs.cfg.gc_free_threshold = 64;
        let (t, c) = (fs.chip().elapsed(), fs.chip().counters());
        let g = fs.gc_pass(false).unwrap();
        assert_eq!(g.victim, 0);
        assert_eq!(g.copied, 3);
        let d = fs.chip().counters().since(&c);
        assert_eq!((d.reads, d.writes, d.erases), (3, 3, 1));
        assert_eq!(fs.chip().elapsed() - t, 3 * 25 + 3 * 300 + 2000);
        fs.check_invariants().unwrap();
    }

    #[test]
    fn names_load_lazily_after_scan() {
        let mut fs = fresh(16);
        fs.set_checkpoint_enabled(false);
        for i in 0..10 {
            fs.create_file(&format!("/f{i}")).unwrap();
        }
        fs.unmount().unwrap();
        fs.mount().unwrap();
        let r = fs.chip().counters().reads;
        fs.readdir("/").unwrap();
        assert_eq!(fs.chip().counters().reads - r, 10);
        let r = fs.chip().counters().reads;
        fs.readdir("/").unwrap();
        fs.stat("/f3").unwrap();
        assert_eq!(fs.chip().counters().reads, r);
    }

    #[test]
    fn fills_up_with_no_space() {
        let mut fs = fresh(12);
        fs.create_file("/a").unwrap();
        let mut off = 0u64;
        let err = loop {
            match fs.write_file("/a", off, &[1u8; 8192]) {
                Ok(()) => off += 8192,
                Err(e) => break e,
            }
        };
        assert_eq!(err, FsError::NoSpace);
        fs.check_invariants().unwrap();
        fs.delete_file("/a").unwrap();
        fs.create_file("/b").unwrap();
        fs.write_file("/b", 0, &[2u8; 8192]).unwrap();
        fs.check_invariants().unwrap();
    }
}
