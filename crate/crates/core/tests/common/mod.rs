//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use ffs_arena::flash::{EnduranceMode, PageState};
use ffs_arena::{FlashChip, FlashError, FlashGeometry, Partition};

pub const BLOCKS: u32 = 8;
pub const PPB: u32 = 64;

#[derive(Debug, Clone)]
pub enum FlashOp {
    Read(u32),
    Program(u32, u8),
    Erase(u32),
    MarkBad(u32),
}

pub fn flash_op() -> impl Strategy<Value = FlashOp> {
    let pages = BLOCKS * PPB;
    prop_oneof![
        4 => (0..pages).prop_map(FlashOp::Read),
        6 => (0..pages, any::<u8>()).prop_map(|(p, b)| FlashOp::Program(p, b)),
        3 => (0..BLOCKS).prop_map(FlashOp::Erase),
        1 => (0..BLOCKS).prop_map(FlashOp::MarkBad),
    ]
}

/// Small chip with a low endurance limit so wear-out happens within a case.
pub fn chip(seed: u64) -> (FlashChip, Partition) {
    let g = FlashGeometry {
        endurance_limit: 6,
        ..FlashGeometry::with_blocks(BLOCKS)
    };
    let mut c = FlashChip::new(g).unwrap();
    c.set_endurance_mode(EnduranceMode::Probabilistic { seed });
    let p = c.full_partition();
    (c, p)
}

pub fn apply(c: &mut FlashChip, p: &Partition, op: &FlashOp) -> Result<(), FlashError> {
    let g = *c.geometry();
    match *op {
        FlashOp::Read(page) => c.read_page(p, page).map(|_| ()),
        FlashOp::Program(page, b) => {
            c.program_page(p, page, &vec![b; g.page_data_bytes], &vec![b; g.oob_bytes])
        }
        FlashOp::Erase(b) => c.erase_block(p, b),
        FlashOp::MarkBad(b) => c.mark_bad(p, b),
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn ops() -> impl Strategy<Value = (u64, Vec<FlashOp>)> {
    (any::<u64>(), prop::collection::vec(flash_op(), 1..200))
}

/// Erased pages of good blocks read back as all-0xFF data and OOB, and a
/// programmed page keeps the bytes of its first program.
pub fn erased_reads_ff(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&ops(), |(seed, ops)| {
            let (mut c, p) = chip(seed);
            let mut model: HashMap<u32, u8> = HashMap::new();
            for op in &ops {
                let r = apply(&mut c, &p, op);
                match (op, r) {
                    (FlashOp::Program(page, b), Ok(())) => {
                        prop_assert!(model.insert(*page, *b).is_none());
                    }
                    (FlashOp::Program(page, _), Err(FlashError::NotErased { .. })) => {
                        prop_assert!(model.contains_key(page));
                    }
                    (FlashOp::Erase(b), _) | (FlashOp::MarkBad(b), _) => {
                        model.retain(|pg, _| pg / PPB != *b);
                    }
                    _ => {}
                }
            }
            for page in 0..BLOCKS * PPB {
                if c.is_bad(&p, page / PPB).unwrap() {
                    continue;
                }
                let r = c.read_page(&p, page).unwrap();
                match model.get(&page) {
                    None => {
                        prop_assert_eq!(r.state, PageState::Erased);
                        prop_assert!(r.data.iter().chain(r.oob).all(|&x| x == 0xFF));
                    }
                    Some(&b) => {
                        prop_assert_eq!(r.state, PageState::Programmed);
                        prop_assert!(r.data.iter().chain(r.oob).all(|&x| x == b));
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A bad block never becomes good again and erase counts never decrease.
pub fn bad_blocks_monotonic(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&ops(), |(seed, ops)| {
            let (mut c, p) = chip(seed);
            let snap = |c: &FlashChip| -> Vec<(bool, u32)> {
                (0..BLOCKS)
                    .map(|b| {
                        let i = c.block_info(&p, b).unwrap();
                        (i.is_bad, i.erase_count)
                    })
                    .collect()
            };
            let mut prev = snap(&c);
            for op in &ops {
                let r = apply(&mut c, &p, op);
                let now = snap(&c);
                for (b, (was, is)) in prev.iter().zip(&now).enumerate() {
                    prop_assert!(!was.0 || is.0, "block {} came back", b);
                    prop_assert!(is.1 >= was.1);
                    if is.0 {
                        let blocked = matches!(
                            apply(&mut c.clone(), &p, &FlashOp::Erase(b as u32)),
                            Err(FlashError::BadBlock(_))
                        );
                        prop_assert!(blocked);
                    }
                }
                if let Err(FlashError::BlockWornOut(_)) = r {
                    if let FlashOp::Erase(b) = op {
                        prop_assert!(now[*b as usize].0);
                    }
                }
                prev = now;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Replaying the same operations on a fresh chip gives the same clock,
/// counters and contents, and the clock equals the summed latencies.
pub fn clock_replay(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&ops(), |(seed, ops)| {
            let run = || {
                let (mut c, p) = chip(seed);
                let results: Vec<_> = ops.iter().map(|op| apply(&mut c, &p, op)).collect();
                (c, results)
            };
            let (a, ra) = run();
            let (b, rb) = run();
            prop_assert_eq!(ra, rb);
            prop_assert_eq!(a.elapsed(), b.elapsed());
            prop_assert_eq!(a.counters(), b.counters());
            prop_assert!(a == b);
            prop_assert_eq!(a.to_image(), b.to_image());
            let g = a.geometry();
            let k = a.counters();
            let expect = k.reads * g.read_latency_us
                + k.writes * g.write_latency_us
                + k.erases * g.erase_latency_us
                + k.cpu_us;
            prop_assert_eq!(a.elapsed(), expect);
            Ok(())
        })
        .map_err(|e: proptest::test_runner::TestError<_>| e.to_string())
}

pub fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}
