//! Node-parallel evaluation helpers.
//!
//! Every per-node stencil evaluation in the crate goes through [`map_nodes`].
//! With the `parallel` feature (default) the work is spread over the rayon
//! pool; without it, or when the mode is switched to
//! [`ExecMode::Sequential`], it runs on the calling thread. Results are
//! always collected in node order, and reductions over the collected values
//! are done sequentially by the callers, so both modes produce bit-identical
//! output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Below this many nodes the rayon overhead outweighs the work.
const MIN_PARALLEL_LEN: usize = 256;

pub fn set_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => 0,
            ExecMode::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Caps the global pool size. `0` keeps rayon's default (one worker per core).
/// Has no effect once the global pool has been built, or without the
/// `parallel` feature.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads `CAPFLOW_THREADS` and applies it through [`init_threads`].
pub fn init_from_env() {
    if let Some(n) = std::env::var("CAPFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        init_threads(n);
    }
}

pub fn map_nodes<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel && len >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    (0..len).map(f).collect()
}
