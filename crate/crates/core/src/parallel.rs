//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work is spread over a rayon pool; without
//! it [`Parallelism::Parallel`] silently degrades to the sequential loop.
//! Jobs are independent and results come back in input order, so both paths
//! produce identical output.

/// How independent jobs (folds, grid cells, per-bag gradients) are run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// `threads: None` uses the global pool.
    Parallel { threads: Option<usize> },
}

impl Parallelism {
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel {
                threads: Some(jobs),
            }
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Parallelism::Parallel { .. })
    }
}

/// Applies `f` to every item, returning results in input order.
pub fn map<T, R, F>(items: Vec<T>, mode: Parallelism, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.into_iter().map(f).collect(),
        Parallelism::Parallel { threads } => parallel_map(items, threads, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: Vec<T>, threads: Option<usize>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = |items: Vec<T>| items.into_par_iter().map(&f).collect::<Vec<R>>();
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(items)),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                run(items)
            }
        },
        None => run(items),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: Vec<T>, _threads: Option<usize>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}
