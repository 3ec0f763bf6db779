//! Execution mode for data-parallel kernels.
//!
//! With the `parallel` feature the heavy loops (convolution output channels,
//! matmul rows, per-channel scans, batch samples, eval images) are spread over
//! the rayon pool. Without it, or with [`ExecMode::Sequential`] selected at
//! runtime, the same closures run in order on the calling thread. Every
//! parallel split writes disjoint outputs and reduces in index order, so both
//! modes produce bit-identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

pub fn set_mode(mode: ExecMode) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == ExecMode::Parallel as u8 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

#[cfg(feature = "parallel")]
fn go_parallel(work: usize) -> bool {
    work >= MIN_PARALLEL_WORK && mode() == ExecMode::Parallel
}

/// Calls `f(i, chunk)` for each `chunk`-sized piece of `data`.
/// `work` is an estimate of the total cost used to skip tiny jobs.
pub(crate) fn chunks_mut<F>(data: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if go_parallel(work) {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, preserving index order in the result.
pub fn map_indexed<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if go_parallel(work) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Forces the parallel path regardless of size; used for coarse jobs such
/// as independent training samples or eval images.
pub fn map_coarse<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed(n, if n > 1 { usize::MAX } else { 0 }, f)
}
