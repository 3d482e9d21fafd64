//! Per-thread multiply-accumulate counter.
//!
//! Forward matmul, convolution and attention kernels report the MACs they
//! perform so analytical cost models can be checked against real runs.
//! Element-wise ops are not counted.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MACS.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}
