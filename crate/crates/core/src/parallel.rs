//! Process-wide switch for intra-op parallelism.
//!
//! Off by default. When on, kernels split work into pieces that each write
//! disjoint outputs, so results are bit-identical to the serial path. The
//! thread count is whatever the global rayon pool was built with.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(false);

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Run `f` with the switch set to `on`, restoring the previous value after.
pub fn with_enabled<T>(on: bool, f: impl FnOnce() -> T) -> T {
    let prev = ENABLED.swap(on, Ordering::Relaxed);
    let out = f();
    ENABLED.store(prev, Ordering::Relaxed);
    out
}

/// Ordered map over `items`, spread across threads when the switch is on.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    if enabled() && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}
