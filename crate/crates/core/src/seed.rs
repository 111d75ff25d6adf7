//! Stable seed derivation. Every random stream in the crate is a ChaCha8
//! generator keyed by a mix of the run seed and a purpose-specific path,
//! so streams never depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x2545_F491_4F6C_DD1D, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Stream tags keep unrelated uses of the same run seed apart.
pub mod tag {
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const REGION: u64 = 0x5245_4749;
    pub const INIT: u64 = 0x494e_4954;
    pub const WARMUP: u64 = 0x5741_524d;
    pub const STEP: u64 = 0x5354_4550;
    pub const EXEMPLAR: u64 = 0x4558_454d;
    pub const NEGATIVE: u64 = 0x4e45_4741;
    pub const PARAPHRASE: u64 = 0x5041_5241;
    pub const CLASSIFIER: u64 = 0x434c_4153;
    pub const FIXTURE: u64 = 0x4649_5854;
    pub const PROPOSAL: u64 = 0x5052_4f50;
}
