//! Seeded random substreams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by the run
//! seed and a fixed stream id, so reruns with the same seed are identical and
//! adding draws in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sim = 1,
    Init = 2,
    Training = 3,
    Noise = 4,
    Exploration = 5,
    Replay = 6,
    Ablation = 7,
}

/// splitmix64 finalizer, used to derive well-spread child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: u64) -> u64 {
    mix64(mix64(seed) ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A substream further keyed by an index (epoch, sample, ...).
pub fn indexed_substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    rng.set_stream(stream as u64);
    rng
}
