//! Index-parallel helpers. With the `parallel` feature these fan out over the
//! rayon pool; without it they run in order on the calling thread. Results are
//! always returned in index order so reductions stay deterministic.

/// How a data-parallel loop should be executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    /// Use the rayon pool when the `parallel` feature is enabled.
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Parallel => map(n, f),
            Exec::Sequential => map_seq(n, f),
        }
    }
}

pub fn map_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_seq(n, f)
}

/// Applies `f` to consecutive `chunk`-sized pieces of `out`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Order-preserving `Result` collection over a parallel map.
pub fn try_map<T, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    exec.map(n, f).into_iter().collect()
}
