//! Execution mode for embarrassingly parallel loops.
//!
//! Every parallel loop in the crate goes through [`Exec::map`], which keeps
//! input order, so results never depend on the mode or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    /// Rayon work stealing. Falls back to sequential without the `parallel` feature.
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    pub fn from_threads(threads: Option<usize>) -> Self {
        match threads {
            Some(1) => Exec::Sequential,
            _ => Exec::Parallel,
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// `map` over `0..len`.
    pub fn map_range<R, F>(self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..len).into_par_iter().map(f).collect(),
            _ => (0..len).map(f).collect(),
        }
    }
}

/// Sizes the global rayon pool. A no-op without the `parallel` feature.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        // Fails only if the pool was already built, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
