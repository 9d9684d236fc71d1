mod common;

#[test]
fn erased_pages_read_ff() {
    common::erased_reads_ff(1000).unwrap();
}

#[test]
fn bad_blocks_never_recover() {
    common::bad_blocks_monotonic(1000).unwrap();
}

#[test]
fn clock_replays_exactly() {
    common::clock_replay(1000).unwrap();
}
