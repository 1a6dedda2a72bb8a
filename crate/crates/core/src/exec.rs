//! Data-parallel execution with a sequential fallback.
//!
//! Work items are independent and results are collected in input order, so
//! every reduction downstream runs in a fixed order and the two modes produce
//! bitwise-identical results. Without the `parallel` feature, `Parallel`
//! behaves like `Sequential`.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Process-wide default used by [`map_indexed`].
pub fn exec_mode() -> ExecMode {
    match MODE.load(Ordering::Relaxed) {
        PAR => ExecMode::Parallel,
        _ => ExecMode::Sequential,
    }
}

pub fn set_exec_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => SEQ,
            ExecMode::Parallel => PAR,
        },
        Ordering::Relaxed,
    );
}

pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_indexed_with(exec_mode(), items, f)
}

pub fn map_indexed_with<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}
