//! Counter-based random streams.
//!
//! Every consumer draws from a ChaCha stream addressed by `(seed, stream, index)`,
//! so results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Trajectory = 1,
    Measurements = 2,
    ParticleInit = 3,
    ParticleMotion = 4,
    Resampling = 5,
    Sensor = 6,
}

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// Generator for a per-item draw at a given step, e.g. one particle's motion.
pub fn item_rng(seed: u64, stream: Stream, step: u64, item: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream, step);
    rng.set_word_pos(u128::from(item) << 20);
    rng
}
