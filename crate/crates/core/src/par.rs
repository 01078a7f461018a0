//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the [`ExecMode::Parallel`] mode fans work out on the
//! rayon global pool. Without it every mode runs sequentially. Results are always
//! returned in input order, so reductions over them are deterministic regardless
//! of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Ordered map over a slice.
pub fn map<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Ordered map over `0..n` where each worker owns a scratch value built by `init`.
pub fn map_range_init<S, U, I, F>(mode: ExecMode, n: usize, init: I, f: F) -> Vec<U>
where
    U: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map_init(&init, |s, i| f(s, i)).collect();
    }
    let _ = mode;
    let mut scratch = init();
    (0..n).map(|i| f(&mut scratch, i)).collect()
}
