//! UBIFS-style journaled file system on top of [`Ubi`].
//!
//! LEB layout: 0 superblock, 1-2 master copies, 3-4 LEB property table
//! (written alternately), 5 log, 6.. main area. Leaf nodes (inodes, data,
//! directory entries) go through a one-page write buffer into journal LEBs
//! ("buds"). The index is a B+tree over (inode, kind, block-or-hash) keys
//! whose nodes are loaded from flash on first touch and written out of place
//! at commit, so every change rewrites the path up to the root.

use std::collections::HashMap;

use crate::codec::{decode_container, encode_container, Codec};
use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, PageState, Partition};
use crate::ubi::{Ubi, UbiConfig};
use crate::vfs::{
    components, split_parent, DirEntry, FileAttr, FileKind, FlashFs, FsKind, GcProgress, InodeId,
    ROOT_INODE,
};
use crate::wire::{pad_to, Dec, Enc};

const NODE_MAGIC: u32 = 0x0610_1831;
const CH_LEN: usize = 24;

const T_INO: u8 = 0;
const T_DATA: u8 = 1;
const T_DENT: u8 = 2;
const T_IDX: u8 = 3;
const T_MST: u8 = 4;
const T_SB: u8 = 5;
const T_LPT: u8 = 6;
const T_CS: u8 = 7;
const T_REF: u8 = 8;
const T_PAD: u8 = 9;

const SB_LEB: u32 = 0;
const MST_LEBS: [u32; 2] = [1, 2];
const LPT_LEBS: [u32; 2] = [3, 4];
const LOG_LEB: u32 = 5;
pub const MAIN_FIRST: u32 = 6;
/// Free main LEBs held back for commit and GC.
const RESERVE_LEBS: usize = 3;
pub const BLOCK_SIZE: usize = 4096;
pub const MIN_PEBS: u32 = 20;

pub const KEY_INO: u8 = 0;
pub const KEY_DATA: u8 = 1;
pub const KEY_DENT: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UbifsConfig {
    pub codec: Codec,
    pub fanout: usize,
    pub journal_lebs: usize,
    /// Flush the write buffer after each unlink.
    pub sync_on_unlink: bool,
    pub ubi: UbiConfig,
}

impl Default for UbifsConfig {
    fn default() -> Self {
        Self {
            codec: Codec::LzFast,
            fanout: 8,
            journal_lebs: 8,
            sync_on_unlink: true,
            ubi: UbiConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub ino: u64,
    pub kind: u8,
    pub aux: u64,
}

impl Key {
    fn ino(ino: u64) -> Self {
        Self { ino, kind: KEY_INO, aux: 0 }
    }

    fn data(ino: u64, block: u64) -> Self {
        Self { ino, kind: KEY_DATA, aux: block }
    }

    fn dent(parent: u64, name: &str) -> Self {
        Self {
            ino: parent,
            kind: KEY_DENT,
            aux: name_hash(name),
        }
    }

    fn encode(&self, e: &mut Enc) {
        e.u64(self.ino).u8(self.kind).u64(self.aux);
    }

    fn decode(d: &mut Dec) -> FsResult<Self> {
        Ok(Self {
            ino: d.u64()?,
            kind: d.u8()?,
            aux: d.u64()?,
        })
    }
}

/// FNV-1a, 64 bit.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Loc {
    pub lnum: u32,
    pub offs: u32,
    pub len: u32,
}

impl Loc {
    const NONE: Loc = Loc {
        lnum: u32::MAX,
        offs: 0,
        len: 0,
    };

    fn aligned(&self) -> i64 {
        align8(self.len as usize) as i64
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

#[derive(Debug, Clone)]
struct Branch {
    key: Key,
    loc: Loc,
    child: Option<usize>,
}

#[derive(Debug, Clone)]
struct Znode {
    level: u8,
    branches: Vec<Branch>,
    dirty: bool,
    flash: Option<Loc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct LebProps {
    used: u32,
    live: u32,
    index: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Leaf {
    Ino { kind: FileKind, nlink: u32, size: u64 },
    Dent { target: u64, kind: FileKind, name: String },
    Data { block: u64, payload: Vec<u8> },
}

struct ParsedNode {
    ntype: u8,
    sqnum: u64,
    body: Vec<u8>,
    len: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Master {
    cmt_no: u64,
    sqnum: u64,
    root: Option<Loc>,
    lpt: (u32, u32),
    highest_ino: u64,
    idx_head: Option<(u32, u32)>,
}

/// Virtual time of the last mount, split by layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MountTimes {
    pub attach_us: u64,
    pub mount_us: u64,
}

pub struct Ubifs {
    ubi: Ubi,
    cfg: UbifsConfig,
    mounted: bool,
    znodes: Vec<Option<Znode>>,
    free_z: Vec<usize>,
    root: Option<usize>,
    root_loc: Option<Loc>,
    dead_index: Vec<Loc>,
    leaf_cache: HashMap<Key, (Loc, Leaf)>,
    lpt: Option<Vec<LebProps>>,
    lpt_loc: (u32, u32),
    lpt_pending: Vec<(u32, i64, Option<u32>, Option<bool>)>,
    head: Option<(u32, u32)>,
    wbuf: Vec<u8>,
    buds: Vec<u32>,
    log_page: u32,
    idx_head: Option<(u32, u32)>,
    master_page: u32,
    sqnum: u64,
    cmt_no: u64,
    highest_ino: u64,
    commits: u64,
    changed: bool,
    times: MountTimes,
}

impl Ubifs {
    fn blank(ubi: Ubi, cfg: UbifsConfig) -> Self {
        Self {
            ubi,
            cfg,
            mounted: false,
            znodes: Vec::new(),
            free_z: Vec::new(),
            root: None,
            root_loc: None,
            dead_index: Vec::new(),
            leaf_cache: HashMap::new(),
            lpt: None,
            lpt_loc: (LPT_LEBS[0], 0),
            lpt_pending: Vec::new(),
            head: None,
            wbuf: Vec::new(),
            buds: Vec::new(),
            log_page: 0,
            idx_head: None,
            master_page: 0,
            sqnum: 0,
            cmt_no: 0,
            highest_ino: ROOT_INODE,
            commits: 0,
            changed: false,
            times: MountTimes::default(),
        }
    }

    pub fn open(chip: FlashChip, part: Partition, cfg: UbifsConfig) -> FsResult<Self> {
        if part.block_count < MIN_PEBS {
            return Err(FsError::PartitionTooSmall(part.block_count));
        }
        let ubi = Ubi::new(chip, part, cfg.ubi)?;
        Ok(Self::blank(ubi, cfg))
    }

    /// Formats UBI and writes an empty file system.
    pub fn mkfs(chip: FlashChip, part: Partition, cfg: UbifsConfig) -> FsResult<Self> {
        let mut fs = Self::open(chip, part, cfg)?;
        fs.ubi.format()?;
        fs.ubi.attach()?;
        let mut sb = Enc::new();
        sb.u32(fs.ubi.leb_count())
            .u8(cfg.fanout as u8)
            .u8(cfg.codec.id())
            .u32(cfg.journal_lebs as u32);
        let node = fs.node(T_SB, &sb.finish());
        fs.write_page(SB_LEB, 0, &node)?;
        fs.lpt = Some(vec![LebProps::default(); fs.ubi.leb_count() as usize]);
        fs.write_lpt()?;
        fs.write_master()?;
        fs.reset_log()?;
        fs.lpt = None;
        fs.ubi.detach()?;
        Ok(fs)
    }

    pub fn ubi(&self) -> &Ubi {
        &self.ubi
    }

    pub fn mount_times(&self) -> MountTimes {
        self.times
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }

    pub fn bud_count(&self) -> usize {
        self.buds.len()
    }

    pub fn wbuf_len(&self) -> usize {
        self.wbuf.len()
    }

    pub fn loaded_znodes(&self) -> usize {
        self.znodes.iter().filter(|z| z.is_some()).count()
    }

    pub fn dirty_znodes(&self) -> usize {
        self.znodes.iter().flatten().filter(|z| z.dirty).count()
    }

    /// Height of the index tree (0 when empty).
    pub fn tree_height(&self) -> usize {
        self.root
            .and_then(|r| self.znodes[r].as_ref())
            .map(|z| z.level as usize + 1)
            .unwrap_or(0)
    }

    fn page_bytes(&self) -> usize {
        self.ubi.page_bytes()
    }

    fn leb_bytes(&self) -> usize {
        self.ubi.leb_bytes()
    }

    fn require_mounted(&self) -> FsResult<()> {
        if self.mounted {
            Ok(())
        } else {
            Err(FsError::NotMounted)
        }
    }

    // ---- node encoding ----

    fn node(&mut self, ntype: u8, body: &[u8]) -> Vec<u8> {
        self.sqnum += 1;
        let len = CH_LEN + body.len();
        let mut e = Enc::new();
        e.u32(NODE_MAGIC)
            .u32(0)
            .u64(self.sqnum)
            .u32(len as u32)
            .u8(ntype)
            .bytes(&[0; 3])
            .bytes(body);
        let mut buf = e.finish();
        let crc = crc32fast::hash(&buf[8..]);
        buf[4..8].copy_from_slice(&crc.to_le_bytes());
        buf
    }

    fn parse_node(buf: &[u8]) -> Option<ParsedNode> {
        if buf.len() < CH_LEN {
            return None;
        }
        let mut d = Dec::new(buf);
        if d.u32().ok()? != NODE_MAGIC {
            return None;
        }
        let crc = d.u32().ok()?;
        let sqnum = d.u64().ok()?;
        let len = d.u32().ok()? as usize;
        let ntype = d.u8().ok()?;
        if len < CH_LEN || len > buf.len() || crc32fast::hash(&buf[8..len]) != crc {
            return None;
        }
        Some(ParsedNode {
            ntype,
            sqnum,
            body: buf[CH_LEN..len].to_vec(),
            len,
        })
    }

    fn ino_body(ino: u64, kind: FileKind, nlink: u32, size: u64) -> Vec<u8> {
        let mut e = Enc::new();
        e.u64(ino).u8(kind.code()).u32(nlink).u64(size);
        e.finish()
    }

    fn dent_body(parent: u64, target: u64, kind: FileKind, name: &str) -> Vec<u8> {
        let mut e = Enc::new();
        e.u64(parent).u64(target).u8(kind.code()).str(name);
        e.finish()
    }

    fn decode_leaf(p: &ParsedNode) -> FsResult<(Key, Leaf)> {
        let mut d = Dec::new(&p.body);
        let bad = || FsError::Corrupt("leaf node".into());
        match p.ntype {
            T_INO => {
                let ino = d.u64()?;
                let kind = FileKind::from_code(d.u8()?).ok_or_else(bad)?;
                let nlink = d.u32()?;
                let size = d.u64()?;
                Ok((Key::ino(ino), Leaf::Ino { kind, nlink, size }))
            }
            T_DENT => {
                let parent = d.u64()?;
                let target = d.u64()?;
                let kind = FileKind::from_code(d.u8()?).ok_or_else(bad)?;
                let name = d.str()?;
                Ok((Key::dent(parent, &name), Leaf::Dent { target, kind, name }))
            }
            T_DATA => {
                let ino = d.u64()?;
                let block = d.u32()? as u64;
                let (payload, _) = decode_container(&p.body[12..])?;
                Ok((Key::data(ino, block), Leaf::Data { block, payload }))
            }
            _ => Err(bad()),
        }
    }

    // ---- raw LEB access ----

    fn write_page(&mut self, lnum: u32, page: u32, data: &[u8]) -> FsResult<()> {
        let pb = self.page_bytes();
        self.ubi.leb_write(lnum, page, &pad_to(data, pb))
    }

    /// Reads pages `first..` until an erased page; returns the concatenated data.
    fn read_until_erased(&mut self, lnum: u32, first: u32) -> FsResult<(Vec<u8>, u32)> {
        let mut out = Vec::new();
        let mut p = first;
        while p < self.ubi.pages_per_leb() {
            match self.ubi.leb_read(lnum, p)? {
                Some((PageState::Programmed, data)) => out.extend_from_slice(&data),
                _ => break,
            }
            p += 1;
        }
        Ok((out, p))
    }

    fn read_bytes(&mut self, loc: Loc) -> FsResult<Vec<u8>> {
        let pb = self.page_bytes();
        let first = loc.offs as usize / pb;
        let last = (loc.offs as usize + loc.len as usize - 1) / pb;
        let mut buf = Vec::with_capacity((last - first + 1) * pb);
        for page in first..=last {
            match self.head {
                Some((hl, ho)) if hl == loc.lnum && page == ho as usize / pb && !self.wbuf.is_empty() => {
                    buf.extend_from_slice(&pad_to(&self.wbuf, pb));
                }
                _ => match self.ubi.leb_read(loc.lnum, page as u32)? {
                    Some((_, data)) => buf.extend_from_slice(&data),
                    None => return Err(FsError::Corrupt(format!("LEB {} unmapped", loc.lnum))),
                },
            }
        }
        let start = loc.offs as usize - first * pb;
        Ok(buf[start..start + loc.len as usize].to_vec())
    }

    fn read_node(&mut self, loc: Loc) -> FsResult<ParsedNode> {
        let raw = self.read_bytes(loc)?;
        Self::parse_node(&raw)
            .ok_or_else(|| FsError::Corrupt(format!("node at {}:{}", loc.lnum, loc.offs)))
    }

    // ---- LEB properties ----

    fn ensure_lpt(&mut self) -> FsResult<()> {
        if self.lpt.is_some() {
            return Ok(());
        }
        let (lnum, len) = self.lpt_loc;
        let count = self.ubi.leb_count() as usize;
        let mut props = vec![LebProps::default(); count];
        if len > 0 {
            let raw = self.read_bytes(Loc { lnum, offs: 0, len })?;
            let node = Self::parse_node(&raw).ok_or_else(|| FsError::Corrupt("LPT".into()))?;
            let mut d = Dec::new(&node.body);
            let n = d.u32()? as usize;
            for p in props.iter_mut().take(n.min(count)) {
                p.used = d.u32()?;
                p.live = d.u32()?;
                p.index = d.u8()? != 0;
            }
        }
        for (l, p) in props.iter_mut().enumerate() {
            if !self.ubi.is_mapped(l as u32) {
                *p = LebProps::default();
            }
        }
        self.lpt = Some(props);
        for (lnum, live, used, index) in std::mem::take(&mut self.lpt_pending) {
            self.apply_props(lnum, live, used, index);
        }
        Ok(())
    }

    fn apply_props(&mut self, lnum: u32, live: i64, used: Option<u32>, index: Option<bool>) {
        let Some(lpt) = self.lpt.as_mut() else {
            self.lpt_pending.push((lnum, live, used, index));
            return;
        };
        let p = &mut lpt[lnum as usize];
        p.live = (p.live as i64 + live).max(0) as u32;
        if let Some(u) = used {
            p.used = u;
        }
        if let Some(i) = index {
            p.index = i;
        }
    }

    fn add_live(&mut self, lnum: u32, delta: i64) {
        if lnum != u32::MAX && delta != 0 {
            self.apply_props(lnum, delta, None, None);
        }
    }

    fn set_used(&mut self, lnum: u32, used: u32) {
        self.apply_props(lnum, 0, Some(used), None);
    }

    fn reset_props(&mut self, lnum: u32, index: bool) {
        if let Some(lpt) = self.lpt.as_mut() {
            lpt[lnum as usize] = LebProps {
                used: 0,
                live: 0,
                index,
            };
        } else {
            self.lpt_pending.push((lnum, i64::MIN / 2, Some(0), Some(index)));
        }
    }

    fn free_main_lebs(&self) -> usize {
        (MAIN_FIRST..self.ubi.leb_count())
            .filter(|&l| !self.ubi.is_mapped(l))
            .count()
    }

    fn take_free_leb(&mut self, foreground: bool, index: bool) -> FsResult<u32> {
        let mut committed = false;
        let mut guard = self.ubi.leb_count() as usize * 2;
        loop {
            if !foreground || self.free_main_lebs() > RESERVE_LEBS {
                let lnum = (MAIN_FIRST..self.ubi.leb_count())
                    .find(|&l| !self.ubi.is_mapped(l))
                    .ok_or(FsError::NoSpace)?;
                self.ubi.map(lnum)?;
                self.reset_props(lnum, index);
                return Ok(lnum);
            }
            if guard == 0 {
                return Err(FsError::NoSpace);
            }
            guard -= 1;
            match self.gc_pass() {
                Ok(_) => {}
                Err(FsError::NothingToCollect) if !committed => {
                    committed = true;
                    self.commit()?;
                }
                Err(FsError::NothingToCollect) => return Err(FsError::NoSpace),
                Err(e) => return Err(e),
            }
        }
    }

    fn unmap_leb(&mut self, lnum: u32) -> FsResult<()> {
        self.ubi.unmap(lnum)?;
        self.reset_props(lnum, false);
        if self.idx_head.map(|(l, _)| l) == Some(lnum) {
            self.idx_head = None;
        }
        Ok(())
    }

    // ---- journal ----

    fn sync_wbuf(&mut self) -> FsResult<()> {
        let Some((lnum, offs)) = self.head else {
            return Ok(());
        };
        if self.wbuf.is_empty() {
            return Ok(());
        }
        let pb = self.page_bytes();
        let fill = pb - self.wbuf.len();
        if fill >= CH_LEN {
            let pad = self.node(T_PAD, &vec![0u8; fill - CH_LEN]);
            self.wbuf.extend_from_slice(&pad);
        } else {
            self.wbuf.resize(pb, 0);
        }
        let page = offs / pb as u32;
        let data = std::mem::take(&mut self.wbuf);
        self.write_page(lnum, page, &data)?;
        let end = (page + 1) * pb as u32;
        self.head = Some((lnum, end));
        self.set_used(lnum, end);
        Ok(())
    }

    fn retire_head(&mut self) -> FsResult<()> {
        self.sync_wbuf()?;
        if let Some((lnum, _)) = self.head.take() {
            let leb = self.leb_bytes() as u32;
            self.set_used(lnum, leb);
        }
        Ok(())
    }

    fn new_bud(&mut self, foreground: bool) -> FsResult<()> {
        if self.buds.len() >= self.cfg.journal_lebs * 3 / 4 {
            self.commit()?;
        }
        self.retire_head()?;
        let lnum = self.take_free_leb(foreground, false)?;
        // GC inside take_free_leb may have opened a head of its own.
        self.retire_head()?;
        self.head = Some((lnum, 0));
        self.buds.push(lnum);
        self.log_ref(lnum, 0)?;
        Ok(())
    }

    fn log_ref(&mut self, lnum: u32, offs: u32) -> FsResult<()> {
        if self.log_page >= self.ubi.pages_per_leb() {
            return self.commit();
        }
        let mut e = Enc::new();
        e.u32(lnum).u32(offs);
        let node = self.node(T_REF, &e.finish());
        let page = self.log_page;
        self.write_page(LOG_LEB, page, &node)?;
        self.log_page += 1;
        Ok(())
    }

    /// Appends a node to the journal head. `live` nodes count toward the
    /// LEB's live bytes.
    fn journal_write(&mut self, bytes: &[u8], live: bool, foreground: bool) -> FsResult<Loc> {
        let al = align8(bytes.len());
        let leb = self.leb_bytes();
        let mut guard = 4;
        while self
            .head
            .map(|(_, offs)| offs as usize + al > leb)
            .unwrap_or(true)
        {
            if guard == 0 {
                return Err(FsError::NoSpace);
            }
            guard -= 1;
            self.new_bud(foreground)?;
        }
        self.changed = true;
        let (lnum, offs) = self.head.expect("head");
        let pb = self.page_bytes();
        self.wbuf.extend_from_slice(bytes);
        self.wbuf.resize(self.wbuf.len() + al - bytes.len(), 0);
        let mut page = offs / pb as u32;
        while self.wbuf.len() >= pb {
            let rest = self.wbuf.split_off(pb);
            let full = std::mem::replace(&mut self.wbuf, rest);
            self.write_page(lnum, page, &full)?;
            page += 1;
        }
        let end = offs + al as u32;
        self.head = Some((lnum, end));
        self.set_used(lnum, end);
        if live {
            self.add_live(lnum, al as i64);
        }
        Ok(Loc {
            lnum,
            offs,
            len: bytes.len() as u32,
        })
    }

    fn write_leaf(&mut self, ntype: u8, body: &[u8], foreground: bool) -> FsResult<Loc> {
        let node = self.node(ntype, body);
        self.journal_write(&node, true, foreground)
    }

    fn write_dead(&mut self, ntype: u8, body: &[u8]) -> FsResult<()> {
        let node = self.node(ntype, body);
        self.journal_write(&node, false, true)?;
        Ok(())
    }

    // ---- index tree ----

    fn zn(&self, z: usize) -> &Znode {
        self.znodes[z].as_ref().expect("znode")
    }

    fn zn_mut(&mut self, z: usize) -> &mut Znode {
        self.znodes[z].as_mut().expect("znode")
    }

    fn alloc_z(&mut self, z: Znode) -> usize {
        if let Some(i) = self.free_z.pop() {
            self.znodes[i] = Some(z);
            i
        } else {
            self.znodes.push(Some(z));
            self.znodes.len() - 1
        }
    }

    fn free_znode(&mut self, z: usize) {
        if let Some(zn) = self.znodes[z].take() {
            if let Some(l) = zn.flash {
                self.dead_index.push(l);
            }
            self.free_z.push(z);
        }
    }

    fn load_znode(&mut self, loc: Loc) -> FsResult<usize> {
        let node = self.read_node(loc)?;
        if node.ntype != T_IDX {
            return Err(FsError::Corrupt("expected index node".into()));
        }
        let mut d = Dec::new(&node.body);
        let level = d.u8()?;
        let n = d.u16()? as usize;
        let mut branches = Vec::with_capacity(n);
        for _ in 0..n {
            let key = Key::decode(&mut d)?;
            let loc = Loc {
                lnum: d.u32()?,
                offs: d.u32()?,
                len: d.u32()?,
            };
            branches.push(Branch {
                key,
                loc,
                child: None,
            });
        }
        Ok(self.alloc_z(Znode {
            level,
            branches,
            dirty: false,
            flash: Some(loc),
        }))
    }

    fn ensure_root(&mut self) -> FsResult<Option<usize>> {
        if self.root.is_none() {
            if let Some(loc) = self.root_loc {
                self.root = Some(self.load_znode(loc)?);
            }
        }
        Ok(self.root)
    }

    fn child(&mut self, z: usize, i: usize) -> FsResult<usize> {
        if let Some(c) = self.zn(z).branches[i].child {
            return Ok(c);
        }
        let loc = self.zn(z).branches[i].loc;
        let c = self.load_znode(loc)?;
        self.zn_mut(z).branches[i].child = Some(c);
        Ok(c)
    }

    fn mark_dirty(&mut self, z: usize) {
        let zn = self.zn_mut(z);
        if zn.dirty {
            return;
        }
        zn.dirty = true;
        if let Some(l) = zn.flash.take() {
            self.dead_index.push(l);
        }
    }

    fn descend(&mut self, key: &Key) -> FsResult<Vec<(usize, usize)>> {
        let mut path = Vec::new();
        let Some(mut z) = self.ensure_root()? else {
            return Ok(path);
        };
        loop {
            let zn = self.zn(z);
            let idx = match zn.branches.binary_search_by(|b| b.key.cmp(key)) {
                Ok(i) => i,
                Err(0) => 0,
                Err(i) => i - 1,
            };
            let level = zn.level;
            path.push((z, idx));
            if level == 0 {
                break;
            }
            z = self.child(z, idx)?;
        }
        Ok(path)
    }

    fn tnc_lookup(&mut self, key: &Key) -> FsResult<Option<Loc>> {
        let path = self.descend(key)?;
        Ok(path.last().and_then(|&(z, i)| {
            let b = self.zn(z).branches.get(i)?;
            (b.key == *key).then_some(b.loc)
        }))
    }

    /// Inserts or replaces a leaf; returns the superseded location.
    fn tnc_insert(&mut self, key: Key, loc: Loc) -> FsResult<Option<Loc>> {
        let path = self.descend(&key)?;
        let Some(&(z, idx)) = path.last() else {
            let z = self.alloc_z(Znode {
                level: 0,
                branches: vec![Branch {
                    key,
                    loc,
                    child: None,
                }],
                dirty: true,
                flash: None,
            });
            self.root = Some(z);
            return Ok(None);
        };
        for &(p, _) in &path {
            self.mark_dirty(p);
        }
        let zn = self.zn_mut(z);
        if let Some(b) = zn.branches.get_mut(idx) {
            if b.key == key {
                return Ok(Some(std::mem::replace(&mut b.loc, loc)));
            }
        }
        let pos = if zn.branches.get(idx).map(|b| key > b.key).unwrap_or(false) {
            idx + 1
        } else {
            idx
        };
        zn.branches.insert(
            pos,
            Branch {
                key,
                loc,
                child: None,
            },
        );
        let appended = pos + 1 == zn.branches.len();
        self.split(&path, appended);
        Ok(None)
    }

    fn split(&mut self, path: &[(usize, usize)], appended: bool) {
        let fanout = self.cfg.fanout;
        for i in (0..path.len()).rev() {
            let z = path[i].0;
            let len = self.zn(z).branches.len();
            if len <= fanout {
                break;
            }
            // Appends keep the left node full.
            let mid = if appended { len - 1 } else { len / 2 };
            let zn = self.zn_mut(z);
            let right = zn.branches.split_off(mid);
            let level = zn.level;
            let right_key = right[0].key;
            let r = self.alloc_z(Znode {
                level,
                branches: right,
                dirty: true,
                flash: None,
            });
            let branch = Branch {
                key: right_key,
                loc: Loc::NONE,
                child: Some(r),
            };
            if i == 0 {
                let left_key = self.zn(z).branches[0].key;
                let new_root = self.alloc_z(Znode {
                    level: level + 1,
                    branches: vec![
                        Branch {
                            key: left_key,
                            loc: Loc::NONE,
                            child: Some(z),
                        },
                        branch,
                    ],
                    dirty: true,
                    flash: None,
                });
                self.root = Some(new_root);
            } else {
                let (parent, pidx) = path[i - 1];
                self.zn_mut(parent).branches.insert(pidx + 1, branch);
            }
        }
    }

    /// Removes a leaf; returns its location.
    fn tnc_remove(&mut self, key: &Key) -> FsResult<Option<Loc>> {
        let path = self.descend(key)?;
        let Some(&(z, idx)) = path.last() else {
            return Ok(None);
        };
        match self.zn(z).branches.get(idx) {
            Some(b) if b.key == *key => {}
            _ => return Ok(None),
        }
        for &(p, _) in &path {
            self.mark_dirty(p);
        }
        let old = self.zn_mut(z).branches.remove(idx).loc;
        for i in (0..path.len()).rev() {
            let z = path[i].0;
            if !self.zn(z).branches.is_empty() {
                break;
            }
            self.free_znode(z);
            if i == 0 {
                self.root = None;
            } else {
                let (parent, pidx) = path[i - 1];
                self.zn_mut(parent).branches.remove(pidx);
            }
        }
        // Collapse single-child roots.
        while let Some(r) = self.root {
            let zn = self.zn(r);
            if zn.level == 0 || zn.branches.len() != 1 {
                break;
            }
            let c = self.child(r, 0)?;
            self.free_znode(r);
            self.root = Some(c);
        }
        Ok(Some(old))
    }

    fn tnc_range(&mut self, lo: Key, hi: Key) -> FsResult<Vec<(Key, Loc)>> {
        let mut out = Vec::new();
        if let Some(r) = self.ensure_root()? {
            self.range_rec(r, &lo, &hi, &mut out)?;
        }
        Ok(out)
    }

    fn range_rec(&mut self, z: usize, lo: &Key, hi: &Key, out: &mut Vec<(Key, Loc)>) -> FsResult<()> {
        let n = self.zn(z).branches.len();
        let level = self.zn(z).level;
        for i in 0..n {
            let key = self.zn(z).branches[i].key;
            if level == 0 {
                if key > *hi {
                    break;
                }
                if key >= *lo {
                    out.push((key, self.zn(z).branches[i].loc));
                }
                continue;
            }
            if i > 0 && key > *hi {
                break;
            }
            if let Some(next) = self.zn(z).branches.get(i + 1) {
                if next.key <= *lo {
                    continue;
                }
            }
            let c = self.child(z, i)?;
            self.range_rec(c, lo, hi, out)?;
        }
        Ok(())
    }

    fn load_all(&mut self, z: usize) -> FsResult<()> {
        if self.zn(z).level == 0 {
            return Ok(());
        }
        for i in 0..self.zn(z).branches.len() {
            let c = self.child(z, i)?;
            self.load_all(c)?;
        }
        Ok(())
    }

    fn dirty_all(&mut self, z: usize) {
        self.mark_dirty(z);
        let children: Vec<usize> = self.zn(z).branches.iter().filter_map(|b| b.child).collect();
        for c in children {
            self.dirty_all(c);
        }
    }

    // ---- leaves ----

    /// Superseding a leaf turns its bytes into dirty space.
    fn retire_leaf(&mut self, old: Option<Loc>) {
        if let Some(l) = old {
            self.add_live(l.lnum, -l.aligned());
        }
    }

    fn put_leaf(&mut self, key: Key, loc: Loc, leaf: Option<Leaf>) -> FsResult<()> {
        let old = self.tnc_insert(key, loc)?;
        self.retire_leaf(old);
        match leaf {
            Some(l) if !matches!(l, Leaf::Data { .. }) => {
                self.leaf_cache.insert(key, (loc, l));
            }
            _ => {
                self.leaf_cache.remove(&key);
            }
        }
        Ok(())
    }

    fn drop_leaf(&mut self, key: &Key) -> FsResult<()> {
        let old = self.tnc_remove(key)?;
        self.retire_leaf(old);
        self.leaf_cache.remove(key);
        Ok(())
    }

    fn get_leaf(&mut self, key: &Key) -> FsResult<Option<Leaf>> {
        let Some(loc) = self.tnc_lookup(key)? else {
            return Ok(None);
        };
        self.leaf_at(key, loc).map(Some)
    }

    fn leaf_at(&mut self, key: &Key, loc: Loc) -> FsResult<Leaf> {
        if let Some((l, leaf)) = self.leaf_cache.get(key) {
            if *l == loc {
                return Ok(leaf.clone());
            }
        }
        let node = self.read_node(loc)?;
        let (k, leaf) = Self::decode_leaf(&node)?;
        if k != *key {
            return Err(FsError::Corrupt("leaf key mismatch".into()));
        }
        if !matches!(leaf, Leaf::Data { .. }) {
            self.leaf_cache.insert(*key, (loc, leaf.clone()));
        }
        Ok(leaf)
    }

    fn inode(&mut self, ino: u64) -> FsResult<(FileKind, u32, u64)> {
        if ino == ROOT_INODE {
            if let Some(Leaf::Ino { nlink, .. }) = self.get_leaf(&Key::ino(ino))? {
                return Ok((FileKind::Dir, nlink, 0));
            }
            return Ok((FileKind::Dir, 2, 0));
        }
        match self.get_leaf(&Key::ino(ino))? {
            Some(Leaf::Ino { kind, nlink, size }) => Ok((kind, nlink, size)),
            _ => Err(FsError::Corrupt(format!("inode {ino} missing"))),
        }
    }

    fn lookup_dent(&mut self, parent: u64, name: &str) -> FsResult<Option<(u64, FileKind)>> {
        match self.get_leaf(&Key::dent(parent, name))? {
            Some(Leaf::Dent {
                target,
                kind,
                name: n,
            }) if n == name => Ok(Some((target, kind))),
            _ => Ok(None),
        }
    }

    fn resolve_parts(&mut self, parts: &[&str], full: &str) -> FsResult<(u64, FileKind)> {
        let mut cur = (ROOT_INODE, FileKind::Dir);
        for name in parts {
            if cur.1 != FileKind::Dir {
                return Err(FsError::NotADirectory(full.to_string()));
            }
            cur = self
                .lookup_dent(cur.0, name)?
                .ok_or_else(|| FsError::NotFound(full.to_string()))?;
        }
        Ok(cur)
    }

    fn resolve(&mut self, path: &str) -> FsResult<(u64, FileKind)> {
        self.require_mounted()?;
        let parts = components(path)?;
        self.resolve_parts(&parts, path)
    }

    fn resolve_parent(&mut self, path: &str) -> FsResult<(u64, String)> {
        self.require_mounted()?;
        let (parent, name) = split_parent(path)?;
        let (dir, kind) = self.resolve_parts(&parent, path)?;
        if kind != FileKind::Dir {
            return Err(FsError::NotADirectory(path.to_string()));
        }
        Ok((dir, name.to_string()))
    }

    fn touch_dir(&mut self, dir: u64) -> FsResult<()> {
        let (_, nlink, _) = self.inode(dir)?;
        let body = Self::ino_body(dir, FileKind::Dir, nlink, 0);
        let loc = self.write_leaf(T_INO, &body, true)?;
        self.put_leaf(
            Key::ino(dir),
            loc,
            Some(Leaf::Ino {
                kind: FileKind::Dir,
                nlink,
                size: 0,
            }),
        )
    }

    fn create_entry(&mut self, path: &str, kind: FileKind) -> FsResult<InodeId> {
        let (parent, name) = self.resolve_parent(path)?;
        let key = Key::dent(parent, &name);
        if self.get_leaf(&key)?.is_some() {
            return Err(FsError::Exists(path.to_string()));
        }
        let ino = self.highest_ino + 1;
        self.highest_ino = ino;
        let body = Self::dent_body(parent, ino, kind, &name);
        let loc = self.write_leaf(T_DENT, &body, true)?;
        self.put_leaf(
            key,
            loc,
            Some(Leaf::Dent {
                target: ino,
                kind,
                name,
            }),
        )?;
        let nlink = if kind == FileKind::Dir { 2 } else { 1 };
        let body = Self::ino_body(ino, kind, nlink, 0);
        let loc = self.write_leaf(T_INO, &body, true)?;
        self.put_leaf(Key::ino(ino), loc, Some(Leaf::Ino { kind, nlink, size: 0 }))?;
        self.touch_dir(parent)?;
        Ok(ino)
    }

    fn remove_entry(&mut self, path: &str, kind: FileKind) -> FsResult<()> {
        let (parent, name) = self.resolve_parent(path)?;
        let (ino, k) = self
            .lookup_dent(parent, &name)?
            .ok_or_else(|| FsError::NotFound(path.to_string()))?;
        match (kind, k) {
            (FileKind::File, FileKind::Dir) => return Err(FsError::IsADirectory(path.to_string())),
            (FileKind::Dir, FileKind::File) => return Err(FsError::NotADirectory(path.to_string())),
            _ => {}
        }
        if k == FileKind::Dir {
            let lo = Key { ino, kind: KEY_DENT, aux: 0 };
            let hi = Key { ino, kind: KEY_DENT, aux: u64::MAX };
            if !self.tnc_range(lo, hi)?.is_empty() {
                return Err(FsError::NotEmpty(path.to_string()));
            }
        }
        self.write_dead(T_DENT, &Self::dent_body(parent, 0, k, &name))?;
        self.drop_leaf(&Key::dent(parent, &name))?;
        self.write_dead(T_INO, &Self::ino_body(ino, k, 0, 0))?;
        self.drop_inode(ino)?;
        self.touch_dir(parent)?;
        if self.cfg.sync_on_unlink {
            self.sync_wbuf()?;
        }
        Ok(())
    }

    fn drop_inode(&mut self, ino: u64) -> FsResult<()> {
        self.drop_leaf(&Key::ino(ino))?;
        let lo = Key::data(ino, 0);
        let hi = Key::data(ino, u64::MAX);
        for (k, _) in self.tnc_range(lo, hi)? {
            self.drop_leaf(&k)?;
        }
        Ok(())
    }

    fn read_block(&mut self, ino: u64, block: u64) -> FsResult<Option<Vec<u8>>> {
        match self.get_leaf(&Key::data(ino, block))? {
            Some(Leaf::Data { payload, .. }) => Ok(Some(payload)),
            _ => Ok(None),
        }
    }

    fn write_data(&mut self, ino: u64, offset: u64, data: &[u8]) -> FsResult<()> {
        let (kind, nlink, size) = self.inode(ino)?;
        if kind != FileKind::File {
            return Err(FsError::IsADirectory(format!("inode {ino}")));
        }
        if data.is_empty() {
            return Ok(());
        }
        let bs = BLOCK_SIZE as u64;
        let end = offset + data.len() as u64;
        for b in offset / bs..end.div_ceil(bs) {
            let bstart = b * bs;
            let a = offset.max(bstart) - bstart;
            let z = end.min(bstart + bs) - bstart;
            let mut buf = if a > 0 || (z < bs && bstart + z < size) {
                self.read_block(ino, b)?.unwrap_or_default()
            } else {
                Vec::new()
            };
            if (buf.len() as u64) < z {
                buf.resize(z as usize, 0);
            }
            let src = (bstart + a - offset) as usize;
            buf[a as usize..z as usize].copy_from_slice(&data[src..src + (z - a) as usize]);
            if self.cfg.codec != Codec::None {
                self.ubi.chip_mut().charge_compress(buf.len());
            }
            let mut body = Enc::new();
            body.u64(ino).u32(b as u32).bytes(&encode_container(self.cfg.codec, &buf));
            let loc = self.write_leaf(T_DATA, &body.finish(), true)?;
            self.put_leaf(Key::data(ino, b), loc, None)?;
        }
        let size = size.max(end);
        let body = Self::ino_body(ino, kind, nlink, size);
        let loc = self.write_leaf(T_INO, &body, true)?;
        self.put_leaf(Key::ino(ino), loc, Some(Leaf::Ino { kind, nlink, size }))
    }

    fn read_data(&mut self, ino: u64) -> FsResult<Vec<u8>> {
        let (kind, _, size) = self.inode(ino)?;
        if kind != FileKind::File {
            return Err(FsError::IsADirectory(format!("inode {ino}")));
        }
        let mut out = vec![0u8; size as usize];
        let blocks = self.tnc_range(Key::data(ino, 0), Key::data(ino, u64::MAX))?;
        for (key, loc) in blocks {
            if let Leaf::Data { block, payload } = self.leaf_at(&key, loc)? {
                let start = (block as usize) * BLOCK_SIZE;
                if start >= out.len() {
                    continue;
                }
                let n = payload.len().min(out.len() - start);
                out[start..start + n].copy_from_slice(&payload[..n]);
            }
        }
        Ok(out)
    }

    // ---- commit ----

    fn write_lpt(&mut self) -> FsResult<()> {
        let lpt = self.lpt.as_ref().expect("LPT loaded");
        let mut e = Enc::new();
        e.u32(lpt.len() as u32);
        for p in lpt {
            e.u32(p.used).u32(p.live).u8(p.index as u8);
        }
        let body = e.finish();
        let node = self.node(T_LPT, &body);
        let lnum = if self.lpt_loc.0 == LPT_LEBS[0] && self.lpt_loc.1 > 0 {
            LPT_LEBS[1]
        } else {
            LPT_LEBS[0]
        };
        self.ubi.unmap(lnum)?;
        let pb = self.page_bytes();
        for (i, chunk) in node.chunks(pb).enumerate() {
            self.write_page(lnum, i as u32, chunk)?;
        }
        self.lpt_loc = (lnum, node.len() as u32);
        Ok(())
    }

    fn write_master(&mut self) -> FsResult<()> {
        let mut e = Enc::new();
        let root = self.root_loc.unwrap_or(Loc::NONE);
        let (ih_l, ih_o) = self.idx_head.unwrap_or((u32::MAX, 0));
        e.u64(self.cmt_no)
            .u32(root.lnum)
            .u32(root.offs)
            .u32(root.len)
            .u32(self.lpt_loc.0)
            .u32(self.lpt_loc.1)
            .u64(self.highest_ino)
            .u32(ih_l)
            .u32(ih_o);
        let body = e.finish();
        if self.master_page >= self.ubi.pages_per_leb() {
            for l in MST_LEBS {
                self.ubi.unmap(l)?;
            }
            self.master_page = 0;
        }
        for l in MST_LEBS {
            let node = self.node(T_MST, &body);
            let page = self.master_page;
            self.write_page(l, page, &node)?;
        }
        self.master_page += 1;
        Ok(())
    }

    fn reset_log(&mut self) -> FsResult<()> {
        self.ubi.unmap(LOG_LEB)?;
        let mut e = Enc::new();
        e.u64(self.cmt_no);
        let node = self.node(T_CS, &e.finish());
        self.write_page(LOG_LEB, 0, &node)?;
        self.log_page = 1;
        self.buds.clear();
        if let Some((lnum, offs)) = self.head {
            self.buds.push(lnum);
            self.log_ref(lnum, offs)?;
        }
        Ok(())
    }

    fn write_index(&mut self, z: usize, buf: &mut Vec<u8>) -> FsResult<Loc> {
        let n = self.zn(z).branches.len();
        for i in 0..n {
            if let Some(c) = self.zn(z).branches[i].child {
                if self.zn(c).dirty {
                    let loc = self.write_index(c, buf)?;
                    self.zn_mut(z).branches[i].loc = loc;
                }
            }
        }
        let zn = self.zn(z);
        let mut e = Enc::new();
        e.u8(zn.level).u16(zn.branches.len() as u16);
        for b in &zn.branches {
            b.key.encode(&mut e);
            e.u32(b.loc.lnum).u32(b.loc.offs).u32(b.loc.len);
        }
        let node = self.node(T_IDX, &e.finish());
        let loc = self.place_index(&node, buf)?;
        let zn = self.zn_mut(z);
        zn.dirty = false;
        zn.flash = Some(loc);
        Ok(loc)
    }

    /// Packs an index node at the index head. `buf` holds the bytes of the
    /// head's current, not yet programmed page.
    fn place_index(&mut self, node: &[u8], buf: &mut Vec<u8>) -> FsResult<Loc> {
        let al = align8(node.len());
        let leb = self.leb_bytes();
        let pb = self.page_bytes();
        if self
            .idx_head
            .map(|(_, o)| o as usize + al > leb)
            .unwrap_or(true)
        {
            self.flush_index(buf)?;
            let lnum = self.take_free_leb(false, true)?;
            self.idx_head = Some((lnum, 0));
        }
        let (lnum, offs) = self.idx_head.expect("index head");
        buf.extend_from_slice(node);
        buf.resize(buf.len() + al - node.len(), 0);
        let mut page = offs / pb as u32;
        while buf.len() >= pb {
            let rest = buf.split_off(pb);
            let full = std::mem::replace(buf, rest);
            self.write_page(lnum, page, &full)?;
            page += 1;
        }
        let end = offs + al as u32;
        self.idx_head = Some((lnum, end));
        self.set_used(lnum, end);
        self.add_live(lnum, al as i64);
        Ok(Loc {
            lnum,
            offs,
            len: node.len() as u32,
        })
    }

    fn flush_index(&mut self, buf: &mut Vec<u8>) -> FsResult<()> {
        let Some((lnum, offs)) = self.idx_head else {
            return Ok(());
        };
        if buf.is_empty() {
            return Ok(());
        }
        let pb = self.page_bytes() as u32;
        let page = offs / pb;
        let data = std::mem::take(buf);
        self.write_page(lnum, page, &data)?;
        let end = (page + 1) * pb;
        self.idx_head = Some((lnum, end));
        self.set_used(lnum, end);
        Ok(())
    }

    fn index_waste(&self) -> (u64, u64) {
        let Some(lpt) = &self.lpt else {
            return (0, 0);
        };
        let mut waste = 0u64;
        let mut live = 0u64;
        for (l, p) in lpt.iter().enumerate() {
            if p.index && self.ubi.is_mapped(l as u32) {
                live += p.live as u64;
                waste += (p.used - p.live.min(p.used)) as u64;
            }
        }
        let dead: u64 = self.dead_index.iter().map(|l| l.aligned() as u64).sum();
        (waste + dead, live.saturating_sub(dead))
    }

    /// Writes dirty index nodes, LEB properties, master and a fresh log.
    pub fn commit(&mut self) -> FsResult<()> {
        self.require_mounted()?;
        self.ensure_lpt()?;
        self.sync_wbuf()?;
        let (waste, live) = self.index_waste();
        if waste > live.max(self.leb_bytes() as u64) {
            if let Some(r) = self.ensure_root()? {
                self.load_all(r)?;
                self.dirty_all(r);
            }
        }
        let mut buf = Vec::new();
        if let Some(r) = self.root {
            if self.zn(r).dirty {
                self.root_loc = Some(self.write_index(r, &mut buf)?);
            }
        } else {
            self.root_loc = None;
        }
        self.flush_index(&mut buf)?;
        for loc in std::mem::take(&mut self.dead_index) {
            self.add_live(loc.lnum, -loc.aligned());
        }
        self.cmt_no += 1;
        let head_lnum = self.head.map(|(l, _)| l);
        let idx_lnum = self.idx_head.map(|(l, _)| l);
        let dead: Vec<u32> = {
            let lpt = self.lpt.as_ref().expect("LPT");
            (MAIN_FIRST..self.ubi.leb_count())
                .filter(|&l| {
                    self.ubi.is_mapped(l)
                        && lpt[l as usize].live == 0
                        && Some(l) != head_lnum
                        && Some(l) != idx_lnum
                })
                .collect()
        };
        for l in dead {
            self.unmap_leb(l)?;
        }
        self.write_lpt()?;
        self.write_master()?;
        self.reset_log()?;
        self.commits += 1;
        self.changed = false;
        Ok(())
    }

    // ---- garbage collection ----

    fn gc_pass(&mut self) -> FsResult<GcProgress> {
        self.ensure_lpt()?;
        let head_lnum = self.head.map(|(l, _)| l);
        let victim = {
            let lpt = self.lpt.as_ref().expect("LPT");
            (MAIN_FIRST..self.ubi.leb_count())
                .filter(|&l| {
                    let p = lpt[l as usize];
                    self.ubi.is_mapped(l)
                        && !p.index
                        && !self.buds.contains(&l)
                        && Some(l) != head_lnum
                        && p.used > p.live
                })
                .max_by_key(|&l| {
                    let p = lpt[l as usize];
                    (p.used - p.live, std::cmp::Reverse(l))
                })
        };
        let Some(victim) = victim else {
            return Err(FsError::NothingToCollect);
        };
        let props = self.lpt.as_ref().expect("LPT")[victim as usize];
        let mut copied = 0;
        if props.live > 0 {
            let pb = self.page_bytes();
            let pages = (props.used as usize).div_ceil(pb) as u32;
            let mut data = Vec::with_capacity(pages as usize * pb);
            for p in 0..pages {
                match self.ubi.leb_read(victim, p)? {
                    Some((_, d)) => data.extend_from_slice(&d),
                    None => break,
                }
            }
            let mut offs = 0usize;
            while offs + CH_LEN <= data.len() {
                let Some(node) = Self::parse_node(&data[offs..]) else {
                    offs = (offs / pb + 1) * pb;
                    continue;
                };
                let loc = Loc {
                    lnum: victim,
                    offs: offs as u32,
                    len: node.len as u32,
                };
                offs += align8(node.len);
                if !matches!(node.ntype, T_INO | T_DATA | T_DENT) {
                    continue;
                }
                let Ok((key, leaf)) = Self::decode_leaf(&node) else {
                    continue;
                };
                if self.tnc_lookup(&key)? != Some(loc) {
                    continue;
                }
                let raw = data[loc.offs as usize + CH_LEN..loc.offs as usize + node.len].to_vec();
                let new = self.write_leaf(node.ntype, &raw, false)?;
                self.put_leaf(key, new, Some(leaf))?;
                copied += 1;
            }
        }
        let still_ours = !self.buds.contains(&victim)
            && self.head.map(|(l, _)| l) != Some(victim)
            && self.ubi.is_mapped(victim)
            && !self.lpt.as_ref().expect("LPT")[victim as usize].index;
        if still_ours {
            self.unmap_leb(victim)?;
        }
        Ok(GcProgress {
            victim,
            copied,
            erased: 1,
            clean_pick: false,
        })
    }

    // ---- mount ----

    fn read_master(&mut self) -> FsResult<Option<(Master, u32)>> {
        for lnum in MST_LEBS {
            let mut best: Option<Master> = None;
            let mut pages = 0;
            for p in 0..self.ubi.pages_per_leb() {
                let Some((state, data)) = self.ubi.leb_read(lnum, p)? else {
                    break;
                };
                if state == PageState::Erased {
                    break;
                }
                pages = p + 1;
                let Some(node) = Self::parse_node(&data) else {
                    continue;
                };
                if node.ntype != T_MST {
                    continue;
                }
                let mut d = Dec::new(&node.body);
                let cmt_no = d.u64()?;
                let root = Loc {
                    lnum: d.u32()?,
                    offs: d.u32()?,
                    len: d.u32()?,
                };
                let lpt = (d.u32()?, d.u32()?);
                let highest_ino = d.u64()?;
                let ih = (d.u32()?, d.u32()?);
                best = Some(Master {
                    cmt_no,
                    sqnum: node.sqnum,
                    root: (root.lnum != u32::MAX).then_some(root),
                    lpt,
                    highest_ino,
                    idx_head: (ih.0 != u32::MAX).then_some(ih),
                });
            }
            if let Some(m) = best {
                return Ok(Some((m, pages)));
            }
        }
        Ok(None)
    }

    fn mount_fs(&mut self) -> FsResult<()> {
        let sb = self
            .ubi
            .leb_read(SB_LEB, 0)?
            .and_then(|(_, d)| Self::parse_node(&d))
            .filter(|n| n.ntype == T_SB)
            .ok_or_else(|| FsError::NoFilesystem("no UBIFS superblock".into()))?;
        let mut d = Dec::new(&sb.body);
        d.u32()?;
        let fanout = d.u8()? as usize;
        let codec = Codec::from_id(d.u8()?)?;
        self.cfg.fanout = fanout;
        self.cfg.codec = codec;
        let (master, pages) = self
            .read_master()?
            .ok_or_else(|| FsError::Corrupt("no valid master node".into()))?;
        self.master_page = pages;
        self.cmt_no = master.cmt_no;
        self.sqnum = master.sqnum;
        self.root_loc = master.root;
        self.lpt_loc = master.lpt;
        self.highest_ino = master.highest_ino;
        self.idx_head = master.idx_head;
        self.root = None;
        self.znodes.clear();
        self.free_z.clear();
        self.dead_index.clear();
        self.leaf_cache.clear();
        self.lpt = None;
        self.lpt_pending.clear();
        self.head = None;
        self.wbuf.clear();
        self.buds.clear();

        // Log: commit-start node, then one reference per bud.
        let (log, log_pages) = self.read_until_erased(LOG_LEB, 0)?;
        self.log_page = log_pages;
        let pb = self.page_bytes();
        let mut refs = Vec::new();
        for chunk in log.chunks(pb) {
            let Some(node) = Self::parse_node(chunk) else {
                continue;
            };
            self.sqnum = self.sqnum.max(node.sqnum);
            if node.ntype == T_REF {
                let mut d = Dec::new(&node.body);
                refs.push((d.u32()?, d.u32()?));
            }
        }
        // Replay buds in sequence order.
        let mut replay: Vec<(u64, Loc, ParsedNode)> = Vec::new();
        for &(lnum, offs) in &refs {
            let first = offs / pb as u32;
            let (data, end_page) = self.read_until_erased(lnum, first)?;
            let mut o = offs as usize - first as usize * pb;
            while o + CH_LEN <= data.len() {
                let Some(node) = Self::parse_node(&data[o..]) else {
                    o = (o / pb + 1) * pb;
                    continue;
                };
                let loc = Loc {
                    lnum,
                    offs: (first as usize * pb + o) as u32,
                    len: node.len as u32,
                };
                o += align8(node.len);
                replay.push((node.sqnum, loc, node));
            }
            let end = end_page * pb as u32;
            self.set_used(lnum, end);
            if !self.buds.contains(&lnum) {
                self.buds.push(lnum);
            }
            self.head = Some((lnum, end));
        }
        self.changed = !replay.is_empty();
        replay.sort_by_key(|(sq, _, _)| *sq);
        for (sq, loc, node) in replay {
            self.sqnum = self.sqnum.max(sq);
            self.replay_node(loc, &node)?;
        }
        Ok(())
    }

    fn replay_node(&mut self, loc: Loc, node: &ParsedNode) -> FsResult<()> {
        if !matches!(node.ntype, T_INO | T_DATA | T_DENT) {
            return Ok(());
        }
        let (key, leaf) = Self::decode_leaf(node)?;
        match &leaf {
            Leaf::Ino { nlink: 0, .. } => {
                self.drop_inode(key.ino)?;
            }
            Leaf::Dent { target: 0, .. } => {
                self.drop_leaf(&key)?;
            }
            _ => {
                if let Leaf::Ino { .. } = leaf {
                    self.highest_ino = self.highest_ino.max(key.ino);
                }
                if let Leaf::Dent { target, .. } = leaf {
                    self.highest_ino = self.highest_ino.max(target);
                }
                self.add_live(loc.lnum, loc.aligned());
                let old = self.tnc_insert(key, loc)?;
                self.retire_leaf(old);
            }
        }
        Ok(())
    }

    /// Recomputes live bytes per LEB from the index and compares them with
    /// the LEB property table. Loads the whole index.
    pub fn check_lpt(&mut self) -> Result<(), String> {
        self.ensure_lpt().map_err(|e| e.to_string())?;
        let mut expect: HashMap<u32, i64> = HashMap::new();
        if let Some(r) = self.ensure_root().map_err(|e| e.to_string())? {
            self.load_all(r).map_err(|e| e.to_string())?;
            let mut stack = vec![r];
            while let Some(z) = stack.pop() {
                let zn = self.zn(z);
                if let Some(l) = zn.flash {
                    *expect.entry(l.lnum).or_default() += l.aligned();
                }
                for b in &zn.branches {
                    if zn.level == 0 {
                        *expect.entry(b.loc.lnum).or_default() += b.loc.aligned();
                    } else if let Some(c) = b.child {
                        stack.push(c);
                    }
                }
            }
        }
        for l in &self.dead_index {
            *expect.entry(l.lnum).or_default() += l.aligned();
        }
        let lpt = self.lpt.as_ref().expect("LPT");
        for l in MAIN_FIRST..self.ubi.leb_count() {
            let want = expect.get(&l).copied().unwrap_or(0);
            let p = lpt[l as usize];
            if p.live as i64 != want {
                return Err(format!("LEB {l}: live {} != {want}", p.live));
            }
            if p.live > p.used || p.used as usize > self.leb_bytes() {
                return Err(format!("LEB {l}: live {} used {}", p.live, p.used));
            }
        }
        Ok(())
    }
}

impl FlashFs for Ubifs {
    fn kind(&self) -> FsKind {
        FsKind::Ubifs
    }

    /// Attaches UBI (if needed), then mounts the file system.
    fn mount(&mut self) -> FsResult<()> {
        if self.mounted {
            return Err(FsError::AlreadyMounted);
        }
        let t0 = self.ubi.chip().elapsed();
        if !self.ubi.is_attached() {
            self.ubi.attach()?;
        }
        let t1 = self.ubi.chip().elapsed();
        self.mount_fs()?;
        let t2 = self.ubi.chip().elapsed();
        self.times = MountTimes {
            attach_us: t1 - t0,
            mount_us: t2 - t1,
        };
        self.mounted = true;
        Ok(())
    }

    fn unmount(&mut self) -> FsResult<()> {
        self.require_mounted()?;
        if self.changed {
            self.commit()?;
        }
        self.mounted = false;
        self.znodes.clear();
        self.free_z.clear();
        self.root = None;
        self.leaf_cache.clear();
        self.lpt = None;
        self.lpt_pending.clear();
        self.dead_index.clear();
        self.head = None;
        self.buds.clear();
        self.ubi.detach()?;
        Ok(())
    }

    fn is_mounted(&self) -> bool {
        self.mounted
    }

    fn create_file(&mut self, path: &str) -> FsResult<InodeId> {
        self.create_entry(path, FileKind::File)
    }

    fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> FsResult<()> {
        let (ino, kind) = self.resolve(path)?;
        if kind != FileKind::File {
            return Err(FsError::IsADirectory(path.to_string()));
        }
        self.write_data(ino, offset, data)
    }

    fn read_file(&mut self, path: &str) -> FsResult<Vec<u8>> {
        let (ino, kind) = self.resolve(path)?;
        if kind != FileKind::File {
            return Err(FsError::IsADirectory(path.to_string()));
        }
        self.read_data(ino)
    }

    fn delete_file(&mut self, path: &str) -> FsResult<()> {
        self.remove_entry(path, FileKind::File)
    }

    fn mkdir(&mut self, path: &str) -> FsResult<InodeId> {
        self.create_entry(path, FileKind::Dir)
    }

    fn rmdir(&mut self, path: &str) -> FsResult<()> {
        if components(path)?.is_empty() {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        self.remove_entry(path, FileKind::Dir)
    }

    fn readdir(&mut self, path: &str) -> FsResult<Vec<DirEntry>> {
        let (ino, kind) = self.resolve(path)?;
        if kind != FileKind::Dir {
            return Err(FsError::NotADirectory(path.to_string()));
        }
        let lo = Key { ino, kind: KEY_DENT, aux: 0 };
        let hi = Key { ino, kind: KEY_DENT, aux: u64::MAX };
        let mut out = Vec::new();
        for (key, loc) in self.tnc_range(lo, hi)? {
            if let Leaf::Dent { target, kind, name } = self.leaf_at(&key, loc)? {
                out.push(DirEntry {
                    name,
                    kind,
                    inode: target,
                });
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    fn stat(&mut self, path: &str) -> FsResult<FileAttr> {
        let (ino, kind) = self.resolve(path)?;
        let size = if kind == FileKind::File {
            self.inode(ino)?.2
        } else {
            0
        };
        Ok(FileAttr {
            kind,
            size,
            inode: ino,
        })
    }

    fn gc_step(&mut self) -> FsResult<GcProgress> {
        self.require_mounted()?;
        self.gc_pass()
    }

    fn mount_breakdown(&self) -> Option<(u64, u64)> {
        Some((self.times.attach_us, self.times.mount_us))
    }

    fn meta_ram_bytes(&self) -> u64 {
        let z = self.loaded_znodes() * (32 + self.cfg.fanout * 40);
        let leaves: usize = self
            .leaf_cache
            .values()
            .map(|(_, l)| match l {
                Leaf::Dent { name, .. } => 48 + name.len(),
                _ => 48,
            })
            .sum();
        let lpt = self.lpt.as_ref().map(|l| l.len() * 12).unwrap_or(0);
        (z + leaves + lpt + self.wbuf.capacity()) as u64
    }

    fn used_flash_bytes(&self) -> u64 {
        self.lpt
            .as_ref()
            .map(|l| l.iter().map(|p| p.live as u64).sum())
            .unwrap_or(0)
    }

    fn free_bytes(&self) -> u64 {
        let leb = self.leb_bytes() as u64;
        let free = self.free_main_lebs().saturating_sub(RESERVE_LEBS + 2) as u64;
        let dirty: u64 = self
            .lpt
            .as_ref()
            .map(|l| {
                l.iter()
                    .filter(|p| !p.index)
                    .map(|p| (p.used - p.live.min(p.used)) as u64)
                    .sum()
            })
            .unwrap_or(0);
        // Node headers and index take a few percent.
        (free * leb + dirty) / 100 * 94
    }

    fn chip(&self) -> &FlashChip {
        self.ubi.chip()
    }

    fn chip_mut(&mut self) -> &mut FlashChip {
        self.ubi.chip_mut()
    }

    fn partition(&self) -> Partition {
        self.ubi.partition()
    }

    fn into_chip(self: Box<Self>) -> FlashChip {
        self.ubi.into_chip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::FlashGeometry;

    fn fresh(blocks: u32) -> Ubifs {
        let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
        let part = chip.full_partition();
        Ubifs::mkfs(chip, part, UbifsConfig::default()).unwrap()
    }

    fn mounted(blocks: u32) -> Ubifs {
        let mut fs = fresh(blocks);
        fs.mount().unwrap();
        fs
    }

    fn remount(fs: &mut Ubifs) {
        fs.unmount().unwrap();
        fs.mount().unwrap();
    }

    #[test]
    fn fresh_mount_cost_ignores_size() {
        let mut small = fresh(400);
        let mut big = fresh(800);
        let r0 = small.chip().counters();
        small.mount().unwrap();
        let r1 = big.chip().counters();
        big.mount().unwrap();
        let rs = small.chip().counters().since(&r0).reads;
        let rb = big.chip().counters().since(&r1).reads;
        assert!(rs > 400 && rb > 800);
        assert_eq!(rs - 400, rb - 800);
        assert_eq!(small.mount_times().mount_us, big.mount_times().mount_us);
        // superblock, master + erased, log CS + erased
        assert_eq!(small.mount_times().mount_us, 5 * 25);
    }

    #[test]
    fn idle_unmount_writes_nothing() {
        let mut fs = mounted(64);
        let c = fs.chip().counters();
        fs.unmount().unwrap();
        assert_eq!(fs.chip().counters().since(&c).writes, 0);
    }

    #[test]
    fn small_write_stays_in_wbuf() {
        let mut fs = mounted(64);
        fs.create_file("/a").unwrap();
        let before = fs.chip().counters();
        fs.write_file("/a", 0, &[7u8; 750]).unwrap();
        let d = fs.chip().counters().since(&before);
        assert_eq!(d.writes, 0);
        assert_eq!(fs.dirty_znodes(), fs.loaded_znodes());
        assert_eq!(fs.read_file("/a").unwrap(), vec![7u8; 750]);
    }

    #[test]
    fn tree_survives_remount() {
        let mut fs = mounted(64);
        fs.mkdir("/d").unwrap();
        for i in 0..40 {
            let p = format!("/d/f{i:02}");
            fs.create_file(&p).unwrap();
            fs.write_file(&p, 0, &vec![i as u8; 100 + i * 300]).unwrap();
        }
        remount(&mut fs);
        assert_eq!(fs.readdir("/d").unwrap().len(), 40);
        for i in 0..40 {
            let p = format!("/d/f{i:02}");
            assert_eq!(fs.read_file(&p).unwrap(), vec![i as u8; 100 + i * 300]);
        }
        assert!(fs.tree_height() >= 2);
        fs.check_lpt().unwrap();
    }

    #[test]
    fn journal_replay_without_commit() {
        let mut fs = mounted(64);
        fs.create_file("/x").unwrap();
        fs.write_file("/x", 0, b"hello").unwrap();
        fs.sync_wbuf().unwrap();
        // Simulate power loss: drop in-memory state, keep the flash.
        let part = fs.partition();
        let chip = Box::new(fs).into_chip();
        let mut fs = Ubifs::open(chip, part, UbifsConfig::default()).unwrap();
        fs.mount().unwrap();
        assert_eq!(fs.read_file("/x").unwrap(), b"hello");
    }

    #[test]
    fn delete_then_lookup_fails() {
        let mut fs = mounted(64);
        fs.create_file("/a").unwrap();
        fs.write_file("/a", 0, &[1u8; 5000]).unwrap();
        fs.delete_file("/a").unwrap();
        assert!(matches!(fs.stat("/a"), Err(FsError::NotFound(_))));
        remount(&mut fs);
        assert!(matches!(fs.stat("/a"), Err(FsError::NotFound(_))));
        assert!(fs.readdir("/").unwrap().is_empty());
        fs.check_lpt().unwrap();
    }

    #[test]
    fn gc_on_clean_volume() {
        let mut fs = mounted(64);
        assert!(matches!(fs.gc_step(), Err(FsError::NothingToCollect)));
    }

    #[test]
    fn overwrite_churn_reclaims_space() {
        let mut fs = mounted(40);
        fs.create_file("/big").unwrap();
        let chunk = vec![0xA5u8; 64 * 1024];
        for round in 0..60 {
            fs.write_file("/big", 0, &chunk).unwrap();
            if round % 20 == 0 {
                fs.check_lpt().unwrap();
            }
        }
        assert_eq!(fs.read_file("/big").unwrap(), chunk);
        fs.check_lpt().unwrap();
        remount(&mut fs);
        assert_eq!(fs.read_file("/big").unwrap(), chunk);
    }

    #[test]
    fn partial_block_merge() {
        let mut fs = mounted(64);
        fs.create_file("/m").unwrap();
        fs.write_file("/m", 0, &[1u8; 5000]).unwrap();
        fs.write_file("/m", 3000, &[2u8; 10]).unwrap();
        let mut want = vec![1u8; 5000];
        want[3000..3010].fill(2);
        assert_eq!(fs.read_file("/m").unwrap(), want);
    }

    #[test]
    fn dir_errors() {
        let mut fs = mounted(64);
        fs.mkdir("/d").unwrap();
        fs.create_file("/d/f").unwrap();
        assert!(matches!(fs.rmdir("/d"), Err(FsError::NotEmpty(_))));
        assert!(matches!(fs.delete_file("/d"), Err(FsError::IsADirectory(_))));
        assert!(matches!(fs.create_file("/d/f"), Err(FsError::Exists(_))));
        fs.delete_file("/d/f").unwrap();
        fs.rmdir("/d").unwrap();
        assert!(fs.readdir("/").unwrap().is_empty());
    }

    #[test]
    fn too_small_partition() {
        let chip = FlashChip::new(FlashGeometry::with_blocks(8)).unwrap();
        let part = chip.full_partition();
        assert!(matches!(
            Ubifs::mkfs(chip, part, UbifsConfig::default()),
            Err(FsError::PartitionTooSmall(8))
        ));
    }
}
