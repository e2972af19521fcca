//! Order-preserving data-parallel helpers. With the `parallel` feature the
//! work runs on rayon; without it everything degrades to plain iterators.
//! Results always come back in input order and are reduced by the caller,
//! so floating-point sums do not depend on the thread schedule.

pub use self::actual::{map_collect, map_range, with_jobs};

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().with_min_len(8).map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    /// Runs `f` on a dedicated pool of `jobs` threads. Nested calls to the
    /// helpers above inherit that pool.
    pub fn with_jobs<R, F>(jobs: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn with_jobs<R, F>(_jobs: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<usize> = (0..1000).collect();
        let out = with_jobs(4, || map_collect(&v, |x| x * 2));
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
