//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature (default) [`ExecMode::Parallel`] fans out over
//! the rayon pool; without it, both modes run sequentially. Every item owns
//! its PRNG stream, so results are identical in either mode.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn map<T, R, F>(self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => {
                use rayon::prelude::*;
                items.into_par_iter().map(f).collect()
            }
            _ => items.into_iter().map(f).collect(),
        }
    }

    /// `map` over `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        self.map((0..n).collect(), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| i * i;
        let a = ExecMode::Sequential.map_range(100, f);
        let b = ExecMode::Parallel.map_range(100, f);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }
}
