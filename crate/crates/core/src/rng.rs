//! Seeded random streams.
//!
//! Each run derives three independent ChaCha8 streams from one master seed:
//! the generator is keyed with `seed_from_u64(master)` and each stream uses a
//! distinct ChaCha stream id (init = 1, shuffle = 2, dropout = 3). Consuming
//! one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;
pub const DROPOUT_STREAM: u64 = 3;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub struct SeedStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

pub fn set_seed(seed: u64) -> SeedStreams {
    SeedStreams {
        init: stream(seed, INIT_STREAM),
        shuffle: stream(seed, SHUFFLE_STREAM),
        dropout: stream(seed, DROPOUT_STREAM),
    }
}
