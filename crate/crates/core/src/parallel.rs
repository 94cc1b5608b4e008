//! Worker partitioning for the numeric kernels.
//!
//! Kernels only ever split work over disjoint output ranges and every output
//! element is reduced in a fixed order, so parallel and sequential execution
//! produce identical bits. Deterministic mode additionally pins execution to
//! the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if is_deterministic() || out.len() <= chunk {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
