//! Seeded, portable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const STAGE_ORDER: u64 = 4;
    pub const NULL_PROBES: u64 = 5;
    pub const PROBE_TOKENS: u64 = 6;
    pub const PCA_SAMPLES: u64 = 7;
    pub const PERMUTATION: u64 = 8;
    pub const CLASSIFIER_DATA: u64 = 9;
}
