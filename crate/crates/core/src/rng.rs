//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the
//! experiment seed plus a tuple of integers (patient id, timestep, purpose
//! tag, ...). Streams for different keys are independent, so work can be
//! split across threads or re-run piecemeal without changing any value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Purpose tags, so that unrelated consumers of the same ids never share a stream.
pub mod tag {
    pub const PATIENT_PARAMS: u64 = 1;
    pub const STEP: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SEARCH: u64 = 6;
    pub const SPLIT: u64 = 7;
}
