use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

/// Category of saved-for-backward bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerTag {
    /// Sampler iteration states and loss inputs retained for backward.
    StepState,
    /// Tensors cached at non-invertible network boundaries.
    BoundaryCache,
    /// Internal activations of a module (full tapes or transient recomputes).
    ModuleInternal,
}

impl LedgerTag {
    fn index(self) -> usize {
        match self {
            LedgerTag::StepState => 0,
            LedgerTag::BoundaryCache => 1,
            LedgerTag::ModuleInternal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LedgerTag::StepState => "step-state",
            LedgerTag::BoundaryCache => "boundary-cache",
            LedgerTag::ModuleInternal => "module-internal",
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    live: AtomicU64,
    peak: AtomicU64,
    live_by_tag: [AtomicU64; 3],
    peak_by_tag: [AtomicU64; 3],
}

/// Registry of live saved-for-backward bytes with a running peak.
///
/// This counts exactly the tensors retained for the backward pass, not
/// allocator RSS, so the numbers are platform-independent. Cloning the
/// handle shares the underlying counters.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    inner: Arc<Inner>,
}

fn fetch_max(cell: &AtomicU64, value: u64) {
    let mut prev = cell.load(Ordering::Relaxed);
    while prev < value {
        match cell.compare_exchange_weak(prev, value, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => break,
            Err(p) => prev = p,
        }
    }
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    /// Register `bytes` as live until the returned guard is dropped.
    pub fn track(&self, tag: LedgerTag, bytes: usize) -> BytesGuard {
        let bytes = bytes as u64;
        let live = self.inner.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        fetch_max(&self.inner.peak, live);
        let t = tag.index();
        let tlive = self.inner.live_by_tag[t].fetch_add(bytes, Ordering::Relaxed) + bytes;
        fetch_max(&self.inner.peak_by_tag[t], tlive);
        BytesGuard {
            ledger: self.clone(),
            tag,
            bytes,
        }
    }

    pub fn live_bytes(&self) -> u64 {
        self.inner.live.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.inner.peak.load(Ordering::Relaxed)
    }

    pub fn live_for(&self, tag: LedgerTag) -> u64 {
        self.inner.live_by_tag[tag.index()].load(Ordering::Relaxed)
    }

    pub fn peak_for(&self, tag: LedgerTag) -> u64 {
        self.inner.peak_by_tag[tag.index()].load(Ordering::Relaxed)
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            live_bytes: self.live_bytes(),
            peak_bytes: self.peak_bytes(),
            peak_step_state: self.peak_for(LedgerTag::StepState),
            peak_boundary_cache: self.peak_for(LedgerTag::BoundaryCache),
            peak_module_internal: self.peak_for(LedgerTag::ModuleInternal),
        }
    }

    fn release(&self, tag: LedgerTag, bytes: u64) {
        self.inner.live.fetch_sub(bytes, Ordering::Relaxed);
        self.inner.live_by_tag[tag.index()].fetch_sub(bytes, Ordering::Relaxed);
    }
}

/// RAII registration of tracked bytes; dropping frees them in the ledger.
#[derive(Debug)]
pub struct BytesGuard {
    ledger: Ledger,
    tag: LedgerTag,
    bytes: u64,
}

impl Drop for BytesGuard {
    fn drop(&mut self) {
        self.ledger.release(self.tag, self.bytes);
    }
}

/// Snapshot of ledger state, serializable into training logs and the
/// memory benchmark report.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport {
    pub live_bytes: u64,
    pub peak_bytes: u64,
    pub peak_step_state: u64,
    pub peak_boundary_cache: u64,
    pub peak_module_internal: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_returns_to_zero_and_peak_sticks() {
        let ledger = Ledger::new();
        {
            let _a = ledger.track(LedgerTag::StepState, 100);
            {
                let _b = ledger.track(LedgerTag::BoundaryCache, 50);
                assert_eq!(ledger.live_bytes(), 150);
            }
            assert_eq!(ledger.live_bytes(), 100);
        }
        assert_eq!(ledger.live_bytes(), 0);
        assert_eq!(ledger.peak_bytes(), 150);
        assert_eq!(ledger.peak_for(LedgerTag::StepState), 100);
        assert_eq!(ledger.peak_for(LedgerTag::BoundaryCache), 50);
    }

    #[test]
    fn peak_tracks_maximum_concurrent() {
        let ledger = Ledger::new();
        let a = ledger.track(LedgerTag::ModuleInternal, 10);
        drop(a);
        let b = ledger.track(LedgerTag::ModuleInternal, 30);
        drop(b);
        assert_eq!(ledger.peak_bytes(), 30);
    }
}
