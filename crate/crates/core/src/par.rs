//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel helper here returns results in input order, so reductions
//! performed by the caller are deterministic whichever policy runs them. With
//! the `parallel` feature disabled, [`Parallelism::Parallel`] silently runs
//! sequentially.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Single thread, in index order.
    Sequential,
    /// Fan out over the rayon pool when the `parallel` feature is enabled.
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when this policy will actually use worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Maps `f` over `0..len`, collecting results in index order.
pub fn map_indexed<T, F>(policy: Parallelism, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..len).map(f).collect()
}

/// Splits `0..len` into `parts` contiguous ranges of near-equal width.
///
/// Empty ranges are dropped, so the result may be shorter than `parts`.
pub fn partition(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1);
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let width = base + usize::from(k < extra);
        if width > 0 {
            out.push(start..start + width);
        }
        start += width;
    }
    out
}
