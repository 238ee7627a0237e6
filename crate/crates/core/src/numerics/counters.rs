//! Per-thread accounting of multiply-adds and live tensor bytes.
//!
//! The multiply-add counter is incremented by the contraction kernels
//! (matmul, attention, convolution, SSD) and by elementwise products, so a
//! given forward pass always reports the same count regardless of hardware.
//! Byte accounting tracks every tensor storage allocation plus kernel scratch
//! buffers that register themselves through [`ScratchGuard`].

use std::cell::Cell;

thread_local! {
    static MADDS: Cell<u64> = const { Cell::new(0) };
    static LIVE_BYTES: Cell<u64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_madds(n: u64) {
    MADDS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Multiply-adds performed on this thread since the last [`reset_madds`].
pub fn madds() -> u64 {
    MADDS.with(Cell::get)
}

pub fn reset_madds() {
    MADDS.with(|c| c.set(0));
}

pub(crate) fn allocate(bytes: u64) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK_BYTES.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: u64) {
    LIVE_BYTES.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensor storage and registered scratch buffers.
pub fn live_bytes() -> u64 {
    LIVE_BYTES.with(Cell::get)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> u64 {
    PEAK_BYTES.with(Cell::get)
}

/// Restart peak tracking from the current live size.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK_BYTES.with(|p| p.set(live));
}

/// Registers a kernel-private buffer with the byte accounting for its lifetime.
pub(crate) struct ScratchGuard(u64);

impl ScratchGuard {
    pub(crate) fn new(elements: usize) -> Self {
        let bytes = (elements * std::mem::size_of::<f64>()) as u64;
        allocate(bytes);
        ScratchGuard(bytes)
    }
}

impl Drop for ScratchGuard {
    fn drop(&mut self) {
        release(self.0);
    }
}
