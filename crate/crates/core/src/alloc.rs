//! Counting global allocator for peak-memory instrumentation.
//!
//! Binaries that want measurements install it:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: cssm_core::alloc::CountingAllocator = cssm_core::alloc::CountingAllocator;
//! ```
//!
//! Counters are process-global atomics; when the allocator is not
//! installed they stay at zero and `peak_since_reset` reports 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static BASELINE: AtomicUsize = AtomicUsize::new(0);

pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let cur = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Currently live bytes.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Start a measurement window: peak resets to the live watermark.
pub fn reset_peak() {
    let cur = CURRENT.load(Ordering::Relaxed);
    BASELINE.store(cur, Ordering::Relaxed);
    PEAK.store(cur, Ordering::Relaxed);
}

/// Peak transient allocation above the live watermark at the last reset.
pub fn peak_since_reset() -> usize {
    PEAK.load(Ordering::Relaxed)
        .saturating_sub(BASELINE.load(Ordering::Relaxed))
}
