//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! ordinary iterator loops. Outputs are always collected in index order, so
//! callers that reduce the returned vectors sequentially get bit-identical
//! results regardless of the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build runs inner loops on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over a slice, returning results in input order.
pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Like [`map_range`] but for fallible work; the first error in index order wins.
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = map_range(1000, |i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
        let out = map_slice(&[3, 1, 2], |v| v + 1);
        assert_eq!(out, vec![4, 2, 3]);
    }

    #[test]
    fn first_error_in_index_order() {
        let r: Result<Vec<usize>, usize> =
            try_map_range(100, |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
