//! Root-seed splitting. Each consumer draws from its own ChaCha stream so
//! changing, say, the number of init draws never shifts the data or shuffle order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A 64-bit seed derived from `seed` for one stream, for components that
/// record their own seed (the dataset generator).
pub fn derive_seed(seed: u64, which: Stream) -> u64 {
    use rand::RngCore;
    stream(seed, which).next_u64()
}
