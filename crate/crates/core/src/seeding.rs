//! Seed derivation. All randomness in the crate flows from a single user seed
//! through these helpers; nothing reads OS entropy or the clock.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for stream `index` of `seed`. Used to give each
/// sample (or each purpose) its own generator so that parallel evaluation is
/// independent of scheduling.
pub fn derive(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ mix(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, index))
}

/// Fixed stream tags so that e.g. the noise stream of the generator never
/// aliases the shuffling stream of training.
pub mod purpose {
    pub const SYNTH_MIXING: u64 = 0x5359_4E00;
    pub const SYNTH_SAMPLES: u64 = 0x5359_4E01;
    pub const SYNTH_JITTER: u64 = 0x5359_4E02;
    pub const CODEBOOK: u64 = 0x434F_4400;
    pub const DECODER_INIT: u64 = 0x4445_4300;
    pub const DECODER_SHUFFLE: u64 = 0x4445_4301;
    pub const NWAY: u64 = 0x4E57_4100;
}
