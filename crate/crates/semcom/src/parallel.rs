//! Data-parallel execution with a sequential fallback.
//!
//! Everything embarrassingly parallel in the crate (sweep trials, evaluation
//! chunks) funnels through these helpers. With the default `parallel`
//! feature they fan out over rayon's global pool; without it they run as
//! plain ordered loops, byte-for-byte equivalent because every work item
//! derives its randomness from its own substream rather than shared state.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build fans work out over threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Fallible ordered map; the first error wins.
pub fn try_par_map<T, U, E, F>(items: Vec<T>, f: F) -> Result<Vec<U>, E>
where
    T: Send,
    U: Send,
    E: Send,
    F: Fn(T) -> Result<U, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let out = par_map((0..100).collect(), |i: i32| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn errors_propagate() {
        let out: Result<Vec<i32>, String> = try_par_map((0..10).collect(), |i: i32| {
            if i == 7 {
                Err("seven".to_string())
            } else {
                Ok(i)
            }
        });
        assert_eq!(out, Err("seven".to_string()));
    }
}
