//! Window pools and per-epoch shuffled batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::windows::enumerate_windows;
use crate::error::{Error, Result};
use crate::harness::mix_seed;

/// One training sample: a window starting at `offset` in corpus run `run`.
/// `id` is the sample's position in its unshuffled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub id: usize,
    pub run: usize,
    pub offset: usize,
}

/// Every window of every listed run, runs in the given order.
pub fn window_pool(runs: &[(usize, usize)], window: usize) -> Result<Vec<WindowRef>> {
    let mut pool = Vec::new();
    for &(run, frames) in runs {
        for offset in enumerate_windows(frames, window)? {
            pool.push(WindowRef { id: pool.len(), run, offset });
        }
    }
    Ok(pool)
}

/// The epoch's pool in seeded random order, cut into batches of at most
/// `batch_size`; the last batch may be short.
pub fn make_batches(pool: &[WindowRef], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<WindowRef>>> {
    if pool.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xba7c4, epoch as u64]));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[WindowRef]>::to_vec).collect())
}
