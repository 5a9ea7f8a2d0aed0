//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon and
//! can be switched off at runtime with [`set_parallel_enabled`], which the
//! bench suite uses to compare both paths in one process. Without the
//! feature they always run sequentially. Either way results are identical:
//! work items are independent and outputs are collected in index order, so
//! no floating-point reduction order ever changes.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon dispatch at runtime. No-op without the
/// `parallel` feature.
#[cfg(feature = "parallel")]
pub fn set_parallel_enabled(on: bool) {
    PARALLEL_ENABLED.store(on, Ordering::Relaxed);
}

#[cfg(not(feature = "parallel"))]
pub fn set_parallel_enabled(_on: bool) {}

/// True when the next helper call may use rayon.
#[cfg(feature = "parallel")]
pub fn parallel_enabled() -> bool {
    PARALLEL_ENABLED.load(Ordering::Relaxed)
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_enabled() -> bool {
    false
}

/// Apply `f(row_index, row)` to every `width`-sized chunk of `data`.
/// `hint_flops` is the approximate per-call work used to decide whether
/// splitting is worth it.
pub fn for_each_row<F>(data: &mut [f64], width: usize, hint_flops: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len().is_multiple_of(width));
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && hint_flops >= PAR_MIN_FLOPS && data.len() / width >= 2 {
            use rayon::prelude::*;
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = hint_flops;
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, hint_flops: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && hint_flops >= PAR_MIN_FLOPS && n >= 2 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = hint_flops;
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in input order.
pub fn map_slice<T, U, F>(items: &[T], hint_flops: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && hint_flops >= PAR_MIN_FLOPS && items.len() >= 2 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    let _ = hint_flops;
    items.iter().map(f).collect()
}

// Below this much total work a rayon dispatch costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 1 << 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_sequential() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        for_each_row(&mut a, 8, usize::MAX, |i, row| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (i * 8 + j) as f64;
            }
        });
        set_parallel_enabled(false);
        for_each_row(&mut b, 8, usize::MAX, |i, row| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (i * 8 + j) as f64;
            }
        });
        set_parallel_enabled(true);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, usize::MAX, |i| i * i);
        assert_eq!(v[99], 99 * 99);
        assert_eq!(v[0], 0);
    }
}
