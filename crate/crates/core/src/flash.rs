//! Raw NAND chip model behind an MTD-like partition interface.
//!
//! The chip enforces erase-before-write, tracks per-block wear and bad state,
//! and charges every operation to a [`VirtualClock`]. Time never comes from
//! the host: two runs executing the same operations report the same
//! [`FlashChip::elapsed`].

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker written to OOB byte 0 of a block's first page when it is retired.
pub const BAD_BLOCK_MARKER: u8 = 0x00;

const IMAGE_MAGIC: &[u8; 4] = b"FFSA";
const IMAGE_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlashError {
    #[error("address out of range: {0}")]
    OutOfRange(String),
    #[error("block {0} is bad")]
    BadBlock(u32),
    #[error("page {page} of block {block} is not erased")]
    NotErased { block: u32, page: u32 },
    #[error("block {0} exceeded its endurance limit")]
    BlockWornOut(u32),
    #[error("buffer size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
}

pub type FlashResult<T> = Result<T, FlashError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashGeometry {
    pub page_data_bytes: usize,
    pub oob_bytes: usize,
    pub pages_per_block: u32,
    pub blocks_per_chip: u32,
    pub read_latency_us: u64,
    pub write_latency_us: u64,
    pub erase_latency_us: u64,
    pub endurance_limit: u32,
}

impl Default for FlashGeometry {
    /// 256 MiB SLC chip: 2048 blocks of 64 × 2 KiB pages.
    fn default() -> Self {
        Self {
            page_data_bytes: 2048,
            oob_bytes: 64,
            pages_per_block: 64,
            blocks_per_chip: 2048,
            read_latency_us: 25,
            write_latency_us: 300,
            erase_latency_us: 2000,
            endurance_limit: 100_000,
        }
    }
}

impl FlashGeometry {
    pub fn with_blocks(blocks_per_chip: u32) -> Self {
        Self {
            blocks_per_chip,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> FlashResult<()> {
        if self.page_data_bytes == 0
            || self.oob_bytes == 0
            || self.pages_per_block == 0
            || self.blocks_per_chip == 0
            || self.endurance_limit == 0
        {
            return Err(FlashError::InvalidGeometry(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn block_bytes(&self) -> usize {
        self.page_data_bytes * self.pages_per_block as usize
    }

    pub fn chip_bytes(&self) -> u64 {
        self.block_bytes() as u64 * self.blocks_per_chip as u64
    }

    /// Number of erase blocks covering `mib` mebibytes.
    pub fn blocks_for_mib(&self, mib: u64) -> u32 {
        ((mib << 20) / self.block_bytes() as u64) as u32
    }
}

/// Monotonic simulated time in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now_us: u64,
}

impl VirtualClock {
    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    fn advance(&mut self, us: u64) {
        self.now_us += us;
    }
}

/// Flash operation counters, attributed per benchmark step by differencing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub reads: u64,
    pub writes: u64,
    pub erases: u64,
    pub cpu_us: u64,
}

impl OpCounters {
    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            erases: self.erases - earlier.erases,
            cpu_us: self.cpu_us - earlier.cpu_us,
        }
    }
}

/// Contiguous run of erase blocks handed to one file system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub first_block: u32,
    pub block_count: u32,
}

impl Partition {
    pub fn new(first_block: u32, block_count: u32) -> Self {
        Self {
            first_block,
            block_count,
        }
    }

    pub fn overlaps(&self, other: &Partition) -> bool {
        self.first_block < other.first_block + other.block_count
            && other.first_block < self.first_block + self.block_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageState {
    Erased,
    Programmed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Page {
    Erased,
    /// Data followed by OOB.
    Programmed(Box<[u8]>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub erase_count: u32,
    pub is_bad: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EnduranceMode {
    /// The erase that pushes the count past the limit fails.
    #[default]
    Deterministic,
    /// Failure probability ramps from 0 at 90% of the limit to 1 at 110%.
    Probabilistic { seed: u64 },
}

/// Borrowed view of one page.
#[derive(Debug, Clone, Copy)]
pub struct PageRef<'a> {
    pub state: PageState,
    pub data: &'a [u8],
    pub oob: &'a [u8],
}

#[derive(Debug, Clone)]
pub struct FlashChip {
    geometry: FlashGeometry,
    pages: Vec<Page>,
    blocks: Vec<BlockInfo>,
    clock: VirtualClock,
    counters: OpCounters,
    erased: Box<[u8]>,
    endurance_mode: EnduranceMode,
    wear_rng: Option<ChaCha8Rng>,
    cpu_us_per_kib_compress: u64,
    rejected_programs: u64,
}

impl PartialEq for FlashChip {
    /// State equality: geometry, pages and block info. The clock is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.geometry == other.geometry && self.pages == other.pages && self.blocks == other.blocks
    }
}

impl FlashChip {
    pub fn new(geometry: FlashGeometry) -> FlashResult<Self> {
        geometry.validate()?;
        let page_count = geometry.pages_per_block as usize * geometry.blocks_per_chip as usize;
        Ok(Self {
            geometry,
            pages: vec![Page::Erased; page_count],
            blocks: vec![BlockInfo::default(); geometry.blocks_per_chip as usize],
            clock: VirtualClock::default(),
            counters: OpCounters::default(),
            erased: vec![0xFF; geometry.page_data_bytes + geometry.oob_bytes].into_boxed_slice(),
            endurance_mode: EnduranceMode::Deterministic,
            wear_rng: None,
            cpu_us_per_kib_compress: 0,
            rejected_programs: 0,
        })
    }

    pub fn set_endurance_mode(&mut self, mode: EnduranceMode) {
        self.endurance_mode = mode;
        self.wear_rng = match mode {
            EnduranceMode::Deterministic => None,
            EnduranceMode::Probabilistic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    /// Whole-chip partition.
    pub fn full_partition(&self) -> Partition {
        Partition::new(0, self.geometry.blocks_per_chip)
    }

    pub fn partition(&self, first_block: u32, block_count: u32) -> FlashResult<Partition> {
        let p = Partition::new(first_block, block_count);
        if block_count == 0 || first_block as u64 + block_count as u64 > self.geometry.blocks_per_chip as u64 {
            return Err(FlashError::OutOfRange(format!(
                "partition {first_block}+{block_count} exceeds {} blocks",
                self.geometry.blocks_per_chip
            )));
        }
        Ok(p)
    }

    pub fn elapsed(&self) -> u64 {
        self.clock.now_us()
    }

    /// Programs refused because the page was not erased.
    pub fn rejected_programs(&self) -> u64 {
        self.rejected_programs
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// CPU-cost hook: advances the clock without touching the media.
    pub fn charge_cpu(&mut self, us: u64) {
        self.clock.advance(us);
        self.counters.cpu_us += us;
    }

    /// Per-KiB compression cost registered by codecs; 0 by default.
    pub fn set_compress_cost(&mut self, us_per_kib: u64) {
        self.cpu_us_per_kib_compress = us_per_kib;
    }

    pub fn charge_compress(&mut self, bytes: usize) {
        if self.cpu_us_per_kib_compress > 0 {
            let us = (bytes as u64 * self.cpu_us_per_kib_compress).div_ceil(1024);
            self.charge_cpu(us);
        }
    }

    pub fn block_info(&self, part: &Partition, block: u32) -> FlashResult<BlockInfo> {
        let abs = self.abs_block(part, block)?;
        Ok(self.blocks[abs as usize])
    }

    pub fn page_state(&self, part: &Partition, page: u32) -> FlashResult<PageState> {
        let idx = self.abs_page(part, page)?;
        Ok(match self.pages[idx] {
            Page::Erased => PageState::Erased,
            Page::Programmed(_) => PageState::Programmed,
        })
    }

    fn abs_block(&self, part: &Partition, block: u32) -> FlashResult<u32> {
        if block >= part.block_count {
            return Err(FlashError::OutOfRange(format!(
                "block {block} outside partition of {} blocks",
                part.block_count
            )));
        }
        let abs = part.first_block + block;
        if abs >= self.geometry.blocks_per_chip {
            return Err(FlashError::OutOfRange(format!("block {abs} outside chip")));
        }
        Ok(abs)
    }

    fn abs_page(&self, part: &Partition, page: u32) -> FlashResult<usize> {
        let ppb = self.geometry.pages_per_block;
        let abs_block = self.abs_block(part, page / ppb)?;
        Ok(abs_block as usize * ppb as usize + (page % ppb) as usize)
    }

    pub fn read_page(&mut self, part: &Partition, page: u32) -> FlashResult<PageRef<'_>> {
        let idx = self.abs_page(part, page)?;
        let abs_block = idx / self.geometry.pages_per_block as usize;
        if self.blocks[abs_block].is_bad {
            return Err(FlashError::BadBlock(abs_block as u32));
        }
        self.clock.advance(self.geometry.read_latency_us);
        self.counters.reads += 1;
        let split = self.geometry.page_data_bytes;
        Ok(match &self.pages[idx] {
            Page::Erased => PageRef {
                state: PageState::Erased,
                data: &self.erased[..split],
                oob: &self.erased[split..],
            },
            Page::Programmed(buf) => PageRef {
                state: PageState::Programmed,
                data: &buf[..split],
                oob: &buf[split..],
            },
        })
    }

    pub fn program_page(
        &mut self,
        part: &Partition,
        page: u32,
        data: &[u8],
        oob: &[u8],
    ) -> FlashResult<()> {
        let idx = self.abs_page(part, page)?;
        let ppb = self.geometry.pages_per_block as usize;
        let abs_block = idx / ppb;
        if self.blocks[abs_block].is_bad {
            return Err(FlashError::BadBlock(abs_block as u32));
        }
        if data.len() != self.geometry.page_data_bytes {
            return Err(FlashError::SizeMismatch {
                expected: self.geometry.page_data_bytes,
                actual: data.len(),
            });
        }
        if oob.len() != self.geometry.oob_bytes {
            return Err(FlashError::SizeMismatch {
                expected: self.geometry.oob_bytes,
                actual: oob.len(),
            });
        }
        if let Page::Programmed(_) = self.pages[idx] {
            self.rejected_programs += 1;
            return Err(FlashError::NotErased {
                block: abs_block as u32,
                page: (idx % ppb) as u32,
            });
        }
        let mut buf = Vec::with_capacity(data.len() + oob.len());
        buf.extend_from_slice(data);
        buf.extend_from_slice(oob);
        self.pages[idx] = Page::Programmed(buf.into_boxed_slice());
        self.clock.advance(self.geometry.write_latency_us);
        self.counters.writes += 1;
        Ok(())
    }

    pub fn erase_block(&mut self, part: &Partition, block: u32) -> FlashResult<()> {
        let abs = self.abs_block(part, block)? as usize;
        if self.blocks[abs].is_bad {
            return Err(FlashError::BadBlock(abs as u32));
        }
        let ppb = self.geometry.pages_per_block as usize;
        for p in &mut self.pages[abs * ppb..(abs + 1) * ppb] {
            *p = Page::Erased;
        }
        self.clock.advance(self.geometry.erase_latency_us);
        self.counters.erases += 1;
        let info = &mut self.blocks[abs];
        info.erase_count += 1;
        if self.wears_out(abs) {
            self.retire(abs);
            return Err(FlashError::BlockWornOut(abs as u32));
        }
        Ok(())
    }

    fn wears_out(&mut self, abs: usize) -> bool {
        let count = self.blocks[abs].erase_count as f64;
        let limit = self.geometry.endurance_limit as f64;
        match (&self.endurance_mode, self.wear_rng.as_mut()) {
            (EnduranceMode::Probabilistic { .. }, Some(rng)) => {
                let p = ((count - 0.9 * limit) / (0.2 * limit)).clamp(0.0, 1.0);
                p > 0.0 && rng.random::<f64>() < p
            }
            _ => count > limit,
        }
    }

    fn retire(&mut self, abs: usize) {
        let ppb = self.geometry.pages_per_block as usize;
        let mut buf = vec![0xFF; self.geometry.page_data_bytes + self.geometry.oob_bytes];
        buf[self.geometry.page_data_bytes] = BAD_BLOCK_MARKER;
        self.pages[abs * ppb] = Page::Programmed(buf.into_boxed_slice());
        self.blocks[abs].is_bad = true;
    }

    pub fn mark_bad(&mut self, part: &Partition, block: u32) -> FlashResult<()> {
        let abs = self.abs_block(part, block)? as usize;
        self.retire(abs);
        Ok(())
    }

    pub fn is_bad(&self, part: &Partition, block: u32) -> FlashResult<bool> {
        let abs = self.abs_block(part, block)? as usize;
        Ok(self.blocks[abs].is_bad)
    }

    /// Size in bytes of the serialized image, computed without materializing it.
    pub fn image_len(&self) -> u64 {
        let g = &self.geometry;
        let page = 1 + g.page_data_bytes as u64 + g.oob_bytes as u64;
        let block = 5 + page * g.pages_per_block as u64;
        4 + 2 + 32 + block * g.blocks_per_chip as u64 + 4
    }

    pub fn save_image<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = CrcWriter::new(out);
        let g = &self.geometry;
        w.put(IMAGE_MAGIC)?;
        w.put(&IMAGE_VERSION.to_le_bytes())?;
        for v in [
            g.page_data_bytes as u32,
            g.oob_bytes as u32,
            g.pages_per_block,
            g.blocks_per_chip,
            g.read_latency_us as u32,
            g.write_latency_us as u32,
            g.erase_latency_us as u32,
            g.endurance_limit,
        ] {
            w.put(&v.to_le_bytes())?;
        }
        let ppb = g.pages_per_block as usize;
        for (b, info) in self.blocks.iter().enumerate() {
            w.put(&info.erase_count.to_le_bytes())?;
            w.put(&[info.is_bad as u8])?;
            for page in &self.pages[b * ppb..(b + 1) * ppb] {
                match page {
                    Page::Erased => {
                        w.put(&[0])?;
                        w.put(&self.erased)?;
                    }
                    Page::Programmed(buf) => {
                        w.put(&[1])?;
                        w.put(buf)?;
                    }
                }
            }
        }
        let crc = w.hasher.clone().finalize();
        w.inner.write_all(&crc.to_le_bytes())
    }

    pub fn to_image(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.image_len() as usize);
        self.save_image(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Restores a chip from [`FlashChip::save_image`] output. The clock starts at 0.
    pub fn load_image(bytes: &[u8]) -> FlashResult<Self> {
        let corrupt = |m: &str| FlashError::CorruptImage(m.to_string());
        if bytes.len() < 4 + 2 + 32 + 4 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != IMAGE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != IMAGE_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let mut fields = [0u32; 8];
        for f in &mut fields {
            *f = r.u32()?;
        }
        let geometry = FlashGeometry {
            page_data_bytes: fields[0] as usize,
            oob_bytes: fields[1] as usize,
            pages_per_block: fields[2],
            blocks_per_chip: fields[3],
            read_latency_us: fields[4] as u64,
            write_latency_us: fields[5] as u64,
            erase_latency_us: fields[6] as u64,
            endurance_limit: fields[7],
        };
        geometry.validate().map_err(|_| corrupt("bad geometry"))?;
        let mut chip = FlashChip::new(geometry)?;
        if chip.image_len() != bytes.len() as u64 {
            return Err(corrupt("length does not match geometry"));
        }
        let page_len = geometry.page_data_bytes + geometry.oob_bytes;
        let ppb = geometry.pages_per_block as usize;
        for b in 0..geometry.blocks_per_chip as usize {
            chip.blocks[b].erase_count = r.u32()?;
            chip.blocks[b].is_bad = r.take(1)?[0] != 0;
            for p in 0..ppb {
                let state = r.take(1)?[0];
                let raw = r.take(page_len)?;
                chip.pages[b * ppb + p] = match state {
                    0 => Page::Erased,
                    1 => Page::Programmed(raw.to_vec().into_boxed_slice()),
                    _ => return Err(corrupt("bad page state")),
                };
            }
        }
        Ok(chip)
    }
}

struct CrcWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> FlashResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FlashError::CorruptImage("truncated body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> FlashResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_chip() -> (FlashChip, Partition) {
        let chip = FlashChip::new(FlashGeometry::with_blocks(16)).unwrap();
        let part = chip.partition(0, 16).unwrap();
        (chip, part)
    }

    fn page_of(byte: u8) -> (Vec<u8>, Vec<u8>) {
        (vec![byte; 2048], vec![byte; 64])
    }

    #[test]
    fn erased_page_reads_ff_and_costs_read_latency() {
        let (mut chip, part) = small_chip();
        let page = chip.read_page(&part, 5).unwrap();
        assert_eq!(page.state, PageState::Erased);
        assert_eq!(page.data.len(), 2048);
        assert!(page.data.iter().all(|&b| b == 0xFF));
        assert!(page.oob.iter().all(|&b| b == 0xFF));
        assert_eq!(chip.elapsed(), 25);
    }

    #[test]
    fn seven_reads_take_175us() {
        let (mut chip, part) = small_chip();
        for p in 0..7 {
            chip.read_page(&part, p).unwrap();
        }
        assert_eq!(chip.elapsed(), 175);
    }

    #[test]
    fn program_then_read_back() {
        let (mut chip, part) = small_chip();
        let data: Vec<u8> = (0..2048).map(|i| (i % 251) as u8).collect();
        let oob = vec![0x42; 64];
        chip.program_page(&part, 3, &data, &oob).unwrap();
        assert_eq!(chip.elapsed(), 300);
        let page = chip.read_page(&part, 3).unwrap();
        assert_eq!(page.data, &data[..]);
        assert_eq!(page.oob, &oob[..]);
    }

    #[test]
    fn double_program_is_rejected() {
        let (mut chip, part) = small_chip();
        let (d, o) = page_of(1);
        chip.program_page(&part, 0, &d, &o).unwrap();
        assert_eq!(
            chip.program_page(&part, 0, &d, &o),
            Err(FlashError::NotErased { block: 0, page: 0 })
        );
    }

    #[test]
    fn seven_page_file_costs_2100us() {
        let (mut chip, part) = small_chip();
        let pages = 13312usize.div_ceil(2048);
        assert_eq!(pages, 7);
        let (d, o) = page_of(7);
        for p in 0..pages as u32 {
            chip.program_page(&part, p, &d, &o).unwrap();
        }
        assert_eq!(chip.elapsed(), 2100);
    }

    #[test]
    fn size_mismatch() {
        let (mut chip, part) = small_chip();
        assert!(matches!(
            chip.program_page(&part, 0, &[0; 100], &[0; 64]),
            Err(FlashError::SizeMismatch { expected: 2048, actual: 100 })
        ));
        assert!(matches!(
            chip.program_page(&part, 0, &[0; 2048], &[0; 8]),
            Err(FlashError::SizeMismatch { expected: 64, actual: 8 })
        ));
    }

    #[test]
    fn erase_resets_pages_and_counts() {
        let (mut chip, part) = small_chip();
        let (d, o) = page_of(0);
        chip.program_page(&part, 64 + 9, &d, &o).unwrap();
        for _ in 0..4 {
            chip.erase_block(&part, 1).unwrap();
        }
        assert_eq!(chip.block_info(&part, 1).unwrap().erase_count, 4);
        let before = chip.elapsed();
        chip.erase_block(&part, 1).unwrap();
        assert_eq!(chip.elapsed() - before, 2000);
        assert_eq!(chip.block_info(&part, 1).unwrap().erase_count, 5);
        let page = chip.read_page(&part, 64 + 9).unwrap();
        assert!(page.data.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn endurance_limit_retires_block() {
        let mut g = FlashGeometry::with_blocks(4);
        g.endurance_limit = 10;
        let mut chip = FlashChip::new(g).unwrap();
        let part = chip.full_partition();
        for _ in 0..10 {
            chip.erase_block(&part, 2).unwrap();
        }
        assert!(!chip.is_bad(&part, 2).unwrap());
        assert_eq!(chip.erase_block(&part, 2), Err(FlashError::BlockWornOut(2)));
        assert!(chip.is_bad(&part, 2).unwrap());
        assert_eq!(chip.erase_block(&part, 2), Err(FlashError::BadBlock(2)));
    }

    #[test]
    fn probabilistic_wear_is_seeded() {
        let run = |seed| {
            let mut g = FlashGeometry::with_blocks(1);
            g.endurance_limit = 100;
            let mut chip = FlashChip::new(g).unwrap();
            chip.set_endurance_mode(EnduranceMode::Probabilistic { seed });
            let part = chip.full_partition();
            let mut n = 0;
            while chip.erase_block(&part, 0).is_ok() {
                n += 1;
            }
            n
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert!((89..=110).contains(&a), "failed after {a} erases");
    }

    #[test]
    fn mark_bad_sets_marker_and_blocks_io() {
        let (mut chip, part) = small_chip();
        for b in 0..16 {
            assert!(!chip.is_bad(&part, b).unwrap());
        }
        chip.mark_bad(&part, 4).unwrap();
        assert!(chip.is_bad(&part, 4).unwrap());
        let (d, o) = page_of(3);
        assert_eq!(chip.program_page(&part, 4 * 64 + 1, &d, &o), Err(FlashError::BadBlock(4)));
        assert_eq!(chip.pages[4 * 64], {
            let mut raw = vec![0xFF; 2048 + 64];
            raw[2048] = BAD_BLOCK_MARKER;
            Page::Programmed(raw.into_boxed_slice())
        });
    }

    #[test]
    fn out_of_range() {
        let mut chip = FlashChip::new(FlashGeometry::with_blocks(16)).unwrap();
        let part = chip.partition(4, 4).unwrap();
        assert!(matches!(chip.read_page(&part, 4 * 64), Err(FlashError::OutOfRange(_))));
        assert!(matches!(chip.erase_block(&part, 4), Err(FlashError::OutOfRange(_))));
        assert!(chip.partition(10, 7).is_err());
    }

    #[test]
    fn partitions_are_offset() {
        let mut chip = FlashChip::new(FlashGeometry::with_blocks(8)).unwrap();
        let a = chip.partition(0, 4).unwrap();
        let b = chip.partition(4, 4).unwrap();
        assert!(!a.overlaps(&b));
        assert!(a.overlaps(&Partition::new(3, 2)));
        let (d, o) = page_of(9);
        chip.program_page(&b, 0, &d, &o).unwrap();
        assert_eq!(chip.page_state(&a, 0).unwrap(), PageState::Erased);
        assert_eq!(chip.page_state(&chip.full_partition(), 4 * 64).unwrap(), PageState::Programmed);
    }

    #[test]
    fn elapsed_examples() {
        let (mut chip, part) = small_chip();
        assert_eq!(chip.elapsed(), 0);
        chip.erase_block(&part, 0).unwrap();
        assert_eq!(chip.elapsed(), 2000);
        let (d, o) = page_of(1);
        chip.program_page(&part, 0, &d, &o).unwrap();
        chip.read_page(&part, 0).unwrap();
        assert_eq!(chip.elapsed(), 2325);
    }

    #[test]
    fn image_round_trip_and_corruption() {
        let (mut chip, part) = small_chip();
        let (d, o) = page_of(0x5A);
        chip.erase_block(&part, 3).unwrap();
        chip.program_page(&part, 3 * 64 + 2, &d, &o).unwrap();
        chip.mark_bad(&part, 7).unwrap();
        let image = chip.to_image();
        assert_eq!(image.len() as u64, chip.image_len());
        let back = FlashChip::load_image(&image).unwrap();
        assert_eq!(back, chip);
        assert_eq!(back.elapsed(), 0);

        assert!(matches!(
            FlashChip::load_image(&image[..image.len() - 10]),
            Err(FlashError::CorruptImage(_))
        ));
        let mut flipped = image.clone();
        flipped[100] ^= 1;
        assert!(matches!(FlashChip::load_image(&flipped), Err(FlashError::CorruptImage(_))));
        let mut magic = image;
        magic[0] = b'X';
        assert!(matches!(FlashChip::load_image(&magic), Err(FlashError::CorruptImage(_))));
    }

    #[test]
    fn pristine_full_size_image_is_not_compressed() {
        let chip = FlashChip::new(FlashGeometry::default()).unwrap();
        assert!(chip.image_len() >= 256 * 1024 * 1024 + 38);
        // 100 MiB partition = 800 blocks of 128 KiB.
        assert_eq!(chip.geometry().blocks_for_mib(100), 800);
    }
}
