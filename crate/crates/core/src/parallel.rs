//! Optional kernel-internal parallelism.
//!
//! `DSEM_LAB_THREADS` caps the number of worker threads (default 1). Kernels
//! only ever split work so that each worker owns a disjoint output slice and
//! every output element keeps its fixed accumulation order, so results are
//! bitwise identical at any thread count.

use std::sync::OnceLock;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

pub fn kernel_threads() -> usize {
    std::env::var("DSEM_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub(crate) fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let threads = kernel_threads();
        if threads <= 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("failed to build kernel thread pool"),
            )
        }
    })
    .as_ref()
}

/// Run `task` for every index in `0..tasks`, writing into equally sized
/// disjoint chunks of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], tasks: usize, task: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if tasks == 0 {
        return;
    }
    assert_eq!(out.len() % tasks, 0);
    let chunk = out.len() / tasks;
    match pool() {
        Some(pool) if tasks > 1 => pool.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, slice)| task(i, slice));
        }),
        _ => {
            for (i, slice) in out.chunks_mut(chunk).enumerate() {
                task(i, slice);
            }
        }
    }
}
