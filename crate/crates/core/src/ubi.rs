//! UBI-style logical erase block layer.
//!
//! Maps logical erase blocks (LEBs) onto physical blocks (PEBs). Page 0 of a
//! mapped PEB holds the erase-counter and volume-id headers, page 1 is kept
//! free and pages 2.. carry the LEB payload. Unmapping only queues the PEB
//! for erasure; the erase runs when a clean PEB is needed or at detach, so a
//! free PEB on flash carries no header and attach assigns it the mean erase
//! count of the others.

use crate::error::{FsError, FsResult};
use crate::flash::{FlashChip, FlashError, PageState, Partition};
use crate::wire::{pad_to, Dec, Enc};

const EC_MAGIC: u32 = 0x5542_4923;
const VID_MAGIC: u32 = 0x5542_4921;
pub const HEADER_PAGES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UbiConfig {
    /// Wear leveling moves data once max(EC) - min(EC) reaches this.
    pub wl_threshold: u64,
    /// PEBs not exposed as LEBs (wear-leveling and bad-block reserve).
    pub reserved_pebs: u32,
}

impl Default for UbiConfig {
    fn default() -> Self {
        Self {
            wl_threshold: 16,
            reserved_pebs: 4,
        }
    }
}

/// One wear-leveling move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WlMove {
    pub lnum: u32,
    pub from: u32,
    pub to: u32,
}

pub struct Ubi {
    chip: FlashChip,
    part: Partition,
    cfg: UbiConfig,
    attached: bool,
    ec: Vec<u64>,
    bad: Vec<bool>,
    leb_to_peb: Vec<Option<u32>>,
    peb_to_leb: Vec<Option<u32>>,
    /// Unmapped PEBs whose erase has not run yet.
    pending: Vec<bool>,
    sqnum: u64,
    wl_moves: u64,
}

impl Ubi {
    pub fn new(chip: FlashChip, part: Partition, cfg: UbiConfig) -> FsResult<Self> {
        if part.block_count <= cfg.reserved_pebs {
            return Err(FsError::PartitionTooSmall(part.block_count));
        }
        Ok(Self {
            chip,
            part,
            cfg,
            attached: false,
            ec: Vec::new(),
            bad: Vec::new(),
            leb_to_peb: Vec::new(),
            peb_to_leb: Vec::new(),
            pending: Vec::new(),
            sqnum: 0,
            wl_moves: 0,
        })
    }

    /// Erases every PEB that is not already erased.
    pub fn format(&mut self) -> FsResult<()> {
        let ppb = self.ppb();
        for b in 0..self.part.block_count {
            if self.chip.is_bad(&self.part, b)? {
                continue;
            }
            let dirty = (0..ppb).any(|p| {
                self.chip.page_state(&self.part, b * ppb + p) == Ok(PageState::Programmed)
            });
            if dirty {
                match self.chip.erase_block(&self.part, b) {
                    Ok(()) | Err(FlashError::BlockWornOut(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        self.attached = false;
        Ok(())
    }

    pub fn chip(&self) -> &FlashChip {
        &self.chip
    }

    pub fn chip_mut(&mut self) -> &mut FlashChip {
        &mut self.chip
    }

    pub fn partition(&self) -> Partition {
        self.part
    }

    pub fn into_chip(self) -> FlashChip {
        self.chip
    }

    pub fn config(&self) -> &UbiConfig {
        &self.cfg
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    pub fn leb_count(&self) -> u32 {
        self.part.block_count - self.cfg.reserved_pebs
    }

    pub fn pages_per_leb(&self) -> u32 {
        self.ppb() - HEADER_PAGES
    }

    pub fn page_bytes(&self) -> usize {
        self.chip.geometry().page_data_bytes
    }

    pub fn leb_bytes(&self) -> usize {
        self.pages_per_leb() as usize * self.page_bytes()
    }

    pub fn wl_moves(&self) -> u64 {
        self.wl_moves
    }

    fn ppb(&self) -> u32 {
        self.chip.geometry().pages_per_block
    }

    fn require_attached(&self) -> FsResult<()> {
        if self.attached {
            Ok(())
        } else {
            Err(FsError::NotMounted)
        }
    }

    /// LEB -> PEB for every mapped LEB.
    pub fn mapping(&self) -> Vec<(u32, u32)> {
        self.leb_to_peb
            .iter()
            .enumerate()
            .filter_map(|(l, p)| p.map(|p| (l as u32, p)))
            .collect()
    }

    /// Erase counters of the good PEBs.
    pub fn erase_counts(&self) -> Vec<u64> {
        self.ec
            .iter()
            .zip(&self.bad)
            .filter(|(_, bad)| !**bad)
            .map(|(ec, _)| *ec)
            .collect()
    }

    pub fn ec_spread(&self) -> u64 {
        let ecs = self.erase_counts();
        ecs.iter().max().copied().unwrap_or(0) - ecs.iter().min().copied().unwrap_or(0)
    }

    pub fn free_pebs(&self) -> usize {
        self.peb_to_leb
            .iter()
            .zip(&self.bad)
            .filter(|(l, bad)| l.is_none() && !**bad)
            .count()
    }

    fn encode_header(&self, ec: u64, lnum: u32, sqnum: u64) -> Vec<u8> {
        let mut e = Enc::new();
        e.u32(EC_MAGIC).u64(ec).u32(VID_MAGIC).u32(0).u32(lnum).u64(sqnum);
        let crc = crc32fast::hash(&e.buf);
        e.u32(crc);
        pad_to(&e.finish(), self.page_bytes())
    }

    fn decode_header(data: &[u8]) -> Option<(u64, u32, u64)> {
        let mut d = Dec::new(data);
        if d.u32().ok()? != EC_MAGIC {
            return None;
        }
        let ec = d.u64().ok()?;
        if d.u32().ok()? != VID_MAGIC {
            return None;
        }
        d.u32().ok()?;
        let lnum = d.u32().ok()?;
        let sqnum = d.u64().ok()?;
        let crc = d.u32().ok()?;
        (crc32fast::hash(&data[..32]) == crc).then_some((ec, lnum, sqnum))
    }

    /// Reads the header page of every PEB and rebuilds the mapping.
    pub fn attach(&mut self) -> FsResult<()> {
        if self.attached {
            return Err(FsError::AlreadyMounted);
        }
        let n = self.part.block_count as usize;
        let ppb = self.ppb();
        self.ec = vec![0; n];
        self.bad = vec![false; n];
        self.peb_to_leb = vec![None; n];
        self.pending = vec![false; n];
        self.leb_to_peb = vec![None; self.leb_count() as usize];
        let mut owner_sq: Vec<u64> = vec![0; self.leb_count() as usize];
        let mut unknown = Vec::new();
        let mut garbage = Vec::new();
        let (mut ec_sum, mut ec_n) = (0u64, 0u64);
        self.sqnum = 0;
        for b in 0..n as u32 {
            if self.chip.is_bad(&self.part, b)? {
                self.bad[b as usize] = true;
                continue;
            }
            let page = self.chip.read_page(&self.part, b * ppb)?;
            if page.state == PageState::Erased {
                unknown.push(b);
                continue;
            }
            let Some((ec, lnum, sq)) = Self::decode_header(page.data) else {
                garbage.push(b);
                continue;
            };
            self.ec[b as usize] = ec;
            ec_sum += ec;
            ec_n += 1;
            self.sqnum = self.sqnum.max(sq);
            if lnum >= self.leb_count() {
                garbage.push(b);
                continue;
            }
            match self.leb_to_peb[lnum as usize] {
                Some(_) if owner_sq[lnum as usize] > sq => garbage.push(b),
                other => {
                    if let Some(o) = other {
                        self.peb_to_leb[o as usize] = None;
                        garbage.push(o);
                    }
                    self.leb_to_peb[lnum as usize] = Some(b);
                    self.peb_to_leb[b as usize] = Some(lnum);
                    owner_sq[lnum as usize] = sq;
                }
            }
        }
        let mean = if ec_n > 0 { (ec_sum + ec_n / 2) / ec_n } else { 0 };
        for b in unknown {
            self.ec[b as usize] = mean;
        }
        self.attached = true;
        for b in garbage {
            if self.peb_to_leb[b as usize].is_none() {
                self.erase_peb(b)?;
            }
        }
        Ok(())
    }

    /// Runs the queued erases.
    pub fn flush_erases(&mut self) -> FsResult<()> {
        for b in 0..self.pending.len() as u32 {
            if self.pending[b as usize] {
                self.erase_peb(b)?;
            }
        }
        Ok(())
    }

    pub fn pending_erases(&self) -> usize {
        self.pending.iter().filter(|p| **p).count()
    }

    /// Flushes queued erases and forgets the mapping.
    pub fn detach(&mut self) -> FsResult<()> {
        if self.attached {
            self.flush_erases()?;
        }
        self.attached = false;
        self.pending.clear();
        self.ec.clear();
        self.bad.clear();
        self.leb_to_peb.clear();
        self.peb_to_leb.clear();
        Ok(())
    }

    pub fn is_mapped(&self, lnum: u32) -> bool {
        self.leb_to_peb
            .get(lnum as usize)
            .map(|p| p.is_some())
            .unwrap_or(false)
    }

    fn erase_peb(&mut self, peb: u32) -> FsResult<()> {
        let r = self.chip.erase_block(&self.part, peb);
        self.pending[peb as usize] = false;
        self.ec[peb as usize] += 1;
        match r {
            Ok(()) => Ok(()),
            Err(FlashError::BlockWornOut(_)) => {
                self.bad[peb as usize] = true;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Picks the least-worn free PEB, preferring clean ones, and runs its
    /// queued erase if it has one.
    fn pick_free(&mut self) -> FsResult<Option<u32>> {
        let free = (0..self.peb_to_leb.len() as u32)
            .filter(|&b| self.peb_to_leb[b as usize].is_none() && !self.bad[b as usize]);
        let pick = free.min_by_key(|&b| (self.pending[b as usize], self.ec[b as usize], b));
        let Some(b) = pick else { return Ok(None) };
        if self.pending[b as usize] {
            self.erase_peb(b)?;
            if self.bad[b as usize] {
                return self.pick_free();
            }
        }
        Ok(Some(b))
    }

    fn map_to(&mut self, lnum: u32, peb: u32) -> FsResult<()> {
        self.sqnum += 1;
        let hdr = self.encode_header(self.ec[peb as usize], lnum, self.sqnum);
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        let ppb = self.ppb();
        self.chip.program_page(&self.part, peb * ppb, &hdr, &oob)?;
        self.leb_to_peb[lnum as usize] = Some(peb);
        self.peb_to_leb[peb as usize] = Some(lnum);
        Ok(())
    }

    fn check_lnum(&self, lnum: u32) -> FsResult<()> {
        if lnum >= self.leb_count() {
            return Err(FsError::Flash(FlashError::OutOfRange(format!("LEB {lnum}"))));
        }
        Ok(())
    }

    /// Maps `lnum` to the free PEB with the lowest erase count.
    pub fn map(&mut self, lnum: u32) -> FsResult<()> {
        self.require_attached()?;
        self.check_lnum(lnum)?;
        if self.is_mapped(lnum) {
            return Ok(());
        }
        let erases = self.chip.counters().erases;
        let peb = self.pick_free()?.ok_or(FsError::NoSpace)?;
        self.map_to(lnum, peb)?;
        if self.chip.counters().erases != erases {
            self.wear_level_step()?;
        }
        Ok(())
    }

    pub fn leb_write(&mut self, lnum: u32, page: u32, data: &[u8]) -> FsResult<()> {
        self.require_attached()?;
        self.check_lnum(lnum)?;
        if page >= self.pages_per_leb() {
            return Err(FsError::Flash(FlashError::OutOfRange(format!(
                "LEB page {page}"
            ))));
        }
        self.map(lnum)?;
        let peb = self.leb_to_peb[lnum as usize].expect("mapped");
        let ppb = self.ppb();
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        let data = pad_to(data, self.page_bytes());
        self.chip
            .program_page(&self.part, peb * ppb + HEADER_PAGES + page, &data, &oob)?;
        Ok(())
    }

    /// Reads one payload page; `None` for an unmapped LEB (no flash access).
    pub fn leb_read(&mut self, lnum: u32, page: u32) -> FsResult<Option<(PageState, Vec<u8>)>> {
        self.require_attached()?;
        self.check_lnum(lnum)?;
        let Some(peb) = self.leb_to_peb[lnum as usize] else {
            return Ok(None);
        };
        let ppb = self.ppb();
        let p = self
            .chip
            .read_page(&self.part, peb * ppb + HEADER_PAGES + page)?;
        Ok(Some((p.state, p.data.to_vec())))
    }

    /// Queues the backing PEB for erasure, then gives wear leveling a turn.
    pub fn unmap(&mut self, lnum: u32) -> FsResult<()> {
        self.require_attached()?;
        self.check_lnum(lnum)?;
        let Some(peb) = self.leb_to_peb[lnum as usize].take() else {
            return Ok(());
        };
        self.peb_to_leb[peb as usize] = None;
        self.pending[peb as usize] = true;
        self.wear_level_step()?;
        Ok(())
    }

    /// Moves the LEB on the least-worn mapped PEB to the most-worn free PEB
    /// when the erase-count spread reaches the threshold.
    pub fn wear_level_step(&mut self) -> FsResult<Option<WlMove>> {
        self.require_attached()?;
        let max = self.erase_counts().into_iter().max().unwrap_or(0);
        let coldest = (0..self.peb_to_leb.len() as u32)
            .filter(|&b| self.peb_to_leb[b as usize].is_some() && !self.bad[b as usize])
            .min_by_key(|&b| (self.ec[b as usize], b));
        let Some(from) = coldest else {
            return Ok(None);
        };
        if max - self.ec[from as usize] < self.cfg.wl_threshold {
            return Ok(None);
        }
        let to = (0..self.peb_to_leb.len() as u32)
            .filter(|&b| self.peb_to_leb[b as usize].is_none() && !self.bad[b as usize])
            .max_by_key(|&b| (self.ec[b as usize] + self.pending[b as usize] as u64, std::cmp::Reverse(b)));
        let Some(to) = to else {
            return Ok(None);
        };
        if self.ec[to as usize] + (self.pending[to as usize] as u64) <= self.ec[from as usize] {
            return Ok(None);
        }
        if self.pending[to as usize] {
            self.erase_peb(to)?;
            if self.bad[to as usize] {
                return Ok(None);
            }
        }
        let lnum = self.peb_to_leb[from as usize].expect("mapped");
        let ppb = self.ppb();
        let mut pages = Vec::new();
        for p in HEADER_PAGES..ppb {
            let page = self.chip.read_page(&self.part, from * ppb + p)?;
            if page.state == PageState::Erased {
                break;
            }
            pages.push(page.data.to_vec());
        }
        self.map_to(lnum, to)?;
        let oob = vec![0xFF; self.chip.geometry().oob_bytes];
        for (i, data) in pages.iter().enumerate() {
            self.chip
                .program_page(&self.part, to * ppb + HEADER_PAGES + i as u32, data, &oob)?;
        }
        self.peb_to_leb[from as usize] = None;
        self.erase_peb(from)?;
        self.wl_moves += 1;
        Ok(Some(WlMove { lnum, from, to }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::FlashGeometry;

    fn ubi(blocks: u32) -> Ubi {
        let chip = FlashChip::new(FlashGeometry::with_blocks(blocks)).unwrap();
        let part = chip.full_partition();
        Ubi::new(chip, part, UbiConfig::default()).unwrap()
    }

    #[test]
    fn attach_reads_one_page_per_peb() {
        let mut u = ubi(800);
        u.attach().unwrap();
        assert_eq!(u.chip().counters().reads, 800);
        assert_eq!(u.chip().elapsed(), 20_000);
        let mut half = ubi(400);
        half.attach().unwrap();
        assert_eq!(u.chip().elapsed() as f64 / half.chip().elapsed() as f64, 2.0);
    }

    #[test]
    fn mapping_survives_detach() {
        let mut u = ubi(32);
        u.attach().unwrap();
        for l in [3, 0, 17, 9] {
            u.leb_write(l, 0, &[l as u8; 100]).unwrap();
        }
        u.unmap(0).unwrap();
        let before = u.mapping();
        u.detach().unwrap();
        u.attach().unwrap();
        assert_eq!(u.mapping(), before);
        let (_, data) = u.leb_read(17, 0).unwrap().unwrap();
        assert_eq!(&data[..100], &[17u8; 100]);
        assert!(u.leb_read(0, 0).unwrap().is_none());
    }

    #[test]
    fn mapping_is_injective() {
        let mut u = ubi(32);
        u.attach().unwrap();
        for round in 0..50u32 {
            let l = round % 7;
            u.leb_write(l, 0, &[1]).unwrap();
            u.unmap(l).unwrap();
            u.leb_write(l + 7, round / 7, &[2]).unwrap();
        }
        let mut pebs: Vec<u32> = u.mapping().into_iter().map(|(_, p)| p).collect();
        let n = pebs.len();
        pebs.sort_unstable();
        pebs.dedup();
        assert_eq!(pebs.len(), n);
    }

    #[test]
    fn uniform_wear_is_left_alone() {
        let mut u = ubi(16);
        u.attach().unwrap();
        u.leb_write(0, 0, &[1]).unwrap();
        assert_eq!(u.wear_level_step().unwrap(), None);
    }

    #[test]
    fn spread_above_threshold_moves_cold_data() {
        let mut u = ubi(16);
        u.attach().unwrap();
        u.leb_write(0, 0, b"cold").unwrap();
        let cold_peb = u.mapping()[0].1;
        // Push a free PEB's count up by hand.
        let hot = (0..16).find(|&b| b != cold_peb).unwrap();
        u.ec[hot as usize] = 20;
        let mv = u.wear_level_step().unwrap().unwrap();
        assert_eq!(mv.from, cold_peb);
        assert_eq!(mv.to, hot);
        assert_eq!(u.ec[cold_peb as usize], 1);
        let (_, data) = u.leb_read(0, 0).unwrap().unwrap();
        assert_eq!(&data[..4], b"cold");
    }

    #[test]
    fn hot_cold_workload_stays_within_threshold() {
        let mut u = ubi(24);
        u.attach().unwrap();
        for l in 0..16 {
            u.leb_write(l, 0, &[0]).unwrap();
        }
        for _ in 0..3000 {
            u.unmap(16).unwrap();
            u.leb_write(16, 0, &[1]).unwrap();
        }
        assert!(u.ec_spread() <= u.config().wl_threshold + 1, "{}", u.ec_spread());
        assert!(u.wl_moves() > 0);
    }
}
