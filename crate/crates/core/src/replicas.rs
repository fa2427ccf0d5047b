//! Seeded replica streams and the data-parallel replica driver.
//!
//! Every replica draws from its own ChaCha8 stream (`rand_chacha` 0.9):
//! the run seed keys the generator and the replica index selects the
//! stream. The stream assignment depends only on the index, so results are
//! identical whether replicas run on one thread or many.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ReplicaRng = ChaCha8Rng;

/// Generator for replica `index` of a run seeded with `seed`.
pub fn replica_rng(seed: u64, index: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// How a batch of independent replicas is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon work-stealing over replicas. Falls back to sequential when the
    /// crate is built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Runs `job(index, rng)` for every replica index in `0..count` and returns
/// the results in index order.
pub fn map_replicas<T, F>(seed: u64, count: usize, execution: Execution, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ReplicaRng) -> T + Sync + Send,
{
    map_replica_range(seed, 0..count, execution, job)
}

/// [`map_replicas`] over an arbitrary index range, for drivers that grow
/// the replica count in chunks.
pub fn map_replica_range<T, F>(seed: u64, range: std::ops::Range<usize>, execution: Execution, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ReplicaRng) -> T + Sync + Send,
{
    let run = |i: usize| {
        let mut rng = replica_rng(seed, i as u64);
        job(i, &mut rng)
    };
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            range.into_par_iter().map(run).collect()
        }
        _ => range.map(run).collect(),
    }
}

/// Like [`map_replicas`] for fallible jobs; the first error in index order
/// wins.
pub fn try_map_replicas<T, E, F>(
    seed: u64,
    count: usize,
    execution: Execution,
    job: F,
) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut ReplicaRng) -> Result<T, E> + Sync + Send,
{
    map_replicas(seed, count, execution, job).into_iter().collect()
}

/// Runs `f` on a dedicated pool with `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    let _ = threads;
    f()
}
