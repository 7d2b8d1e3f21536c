//! Deterministic random streams.
//!
//! Every randomized operation takes an explicit `u64` seed. Work that can be
//! split into independent tasks derives one ChaCha stream per task so results
//! do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root generator for `seed`.
pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Packs up to three task coordinates into one stream id.
pub fn task_id(a: u64, b: u64, c: u64) -> u64 {
    (a & 0xffff) << 48 | (b & 0xff_ffff) << 24 | (c & 0xff_ffff)
}
