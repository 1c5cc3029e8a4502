//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in input order, so reductions performed by
//! the caller over the returned `Vec` always use the same summation order no
//! matter how many threads ran. With the `parallel` feature disabled,
//! [`Exec::Parallel`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel inner loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Map `f` over a slice, collecting results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if items.len() > 1 => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Apply `f(row_index, row)` to every `width`-sized chunk of `out`.
    pub fn for_each_row<F>(self, out: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            _ => out
                .chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
        }
    }
}

/// Cap the global worker pool. Only the first call has an effect.
pub fn init_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_match_between_strategies() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let a = Exec::Sequential.map(&xs, |x| x * 2.0);
        let b = Exec::Parallel.map(&xs, |x| x * 2.0);
        assert_eq!(a, b);
        let c = Exec::Parallel.map_range(17, |i| i * i);
        assert_eq!(c, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn rows_are_indexed() {
        let mut out = vec![0.0; 12];
        Exec::Parallel.for_each_row(&mut out, 3, |i, row| row.fill(i as f64));
        assert_eq!(out, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }
}
