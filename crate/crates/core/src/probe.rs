//! Work and allocation instrumentation for the kernels.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

/// Counts scalar multiply-accumulates and tracks the largest transient
/// buffer a kernel allocated.
///
/// Kernels take `Option<&Probe>`; counting is per row or per tile, so the
/// overhead is negligible.
#[derive(Debug, Default)]
pub struct Probe {
    macs: AtomicU64,
    peak_buffer: AtomicUsize,
}

impl Probe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    /// Largest transient scratch buffer, in elements.
    pub fn peak_buffer(&self) -> usize {
        self.peak_buffer.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.macs.store(0, Ordering::Relaxed);
        self.peak_buffer.store(0, Ordering::Relaxed);
    }
}

#[inline]
pub(crate) fn add_macs(p: Option<&Probe>, n: u64) {
    if let Some(p) = p {
        p.macs.fetch_add(n, Ordering::Relaxed);
    }
}

#[inline]
pub(crate) fn note_buffer(p: Option<&Probe>, elems: usize) {
    if let Some(p) = p {
        p.peak_buffer.fetch_max(elems, Ordering::Relaxed);
    }
}
