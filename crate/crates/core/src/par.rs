//! Deterministic chunked execution.
//!
//! Work is split into fixed-size chunks whose boundaries depend only on the
//! problem size, never on the thread pool. Each chunk owns its own random
//! substream, so the output is bit-identical between the sequential and the
//! rayon backends and across worker counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Items per work chunk for batch generation.
pub const CHUNK_LEN: usize = 1 << 14;

/// Execution backend for the batch operations.
/// Rayon when the `parallel` feature is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Rayon,
}

/// Named random substreams. Every subsystem draws from its own stream so
/// changing one stage never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Pairs = 0x7061_6972,
    Outcomes = 0x6f75_7463,
    Jitter = 0x6a69_7474,
    Darks = 0x6461_726b,
    ScanPoint = 0x7363_616e,
    ChshSetting = 0x6368_7368,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` for the given stream and index.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index)
}

/// Random generator for chunk `index` of `stream`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream as u64)));
    rng.set_stream(index);
    rng
}

/// Maps `f` over chunk indices `0..n_chunks`, returning results in index order.
pub fn map_chunks<T, F>(n_chunks: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n_chunks).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n_chunks).into_par_iter().map(f).collect()
        }
    }
}

/// Number of chunks needed to cover `n` items.
pub fn chunk_count(n: usize) -> usize {
    n.div_ceil(CHUNK_LEN)
}

/// Item range covered by chunk `index` out of `n` items.
pub fn chunk_range(n: usize, index: usize) -> std::ops::Range<usize> {
    let start = index * CHUNK_LEN;
    start..(start + CHUNK_LEN).min(n)
}

pub(crate) fn sort_tags(tags: &mut [u64], par: Parallelism) {
    match par {
        Parallelism::Sequential => tags.sort_unstable(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            tags.par_sort_unstable()
        }
    }
}
