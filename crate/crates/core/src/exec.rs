//! Data-parallel helpers with a sequential fallback.
//!
//! Everything batch-shaped in this crate (per-sample forward passes,
//! evaluation over test sets, event synthesis over samples) goes through
//! these helpers. With the `parallel` feature (default) they dispatch to
//! rayon; without it they degrade to plain iteration. Results are always
//! collected in index order, so the two paths produce identical output and
//! gradient merges stay bit-deterministic.

/// True when this build dispatches to a thread pool.
#[cfg(feature = "parallel")]
pub fn is_parallel() -> bool {
    true
}

/// True when this build dispatches to a thread pool.
#[cfg(not(feature = "parallel"))]
pub fn is_parallel() -> bool {
    false
}

/// Map `f` over `0..count`, in parallel when available.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

/// Map `f` over `0..count`, in parallel when available.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..count).map(f).collect()
}

/// Always-sequential variant of [`map_indexed`]. Kept public so the bench
/// suite can compare both paths within one build.
pub fn map_indexed_seq<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Map over owned items (each worker takes one by value), preserving order.
#[cfg(feature = "parallel")]
pub fn map_into<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Map over owned items (each worker takes one by value), preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_into<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Map `f` over a slice, in parallel when available.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(data: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    data.par_iter().map(f).collect()
}

/// Map `f` over a slice, in parallel when available.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(data: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    data.iter().map(f).collect()
}

/// Always-sequential variant of [`map_slice`].
pub fn map_slice_seq<T, U, F>(data: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    data.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let par: Vec<u64> = map_indexed(64, |i| (i as u64) * 3 + 1);
        let seq: Vec<u64> = map_indexed_seq(64, |i| (i as u64) * 3 + 1);
        assert_eq!(par, seq);
    }

    #[test]
    fn slice_order_is_preserved() {
        let data: Vec<i32> = (0..100).collect();
        let out = map_slice(&data, |x| x * x);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
    }
}
