//! Data-parallel map over slides. Results always come back in input order, so
//! any reduction done on them afterwards is independent of scheduling.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon thread pool; falls back to sequential without the `parallel` feature.
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// `f(0), ..., f(n - 1)` in order.
pub fn map_indexed<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par == Parallelism::Rayon {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        for par in [Parallelism::Sequential, Parallelism::Rayon] {
            assert_eq!(map_indexed(100, par, |i| i * i), (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }
}
