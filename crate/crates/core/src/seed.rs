//! Portable seeded random streams.
//!
//! Every generator in the crate is a ChaCha8 stream keyed by a 64-bit seed.
//! Independent consumers of the same seed read disjoint ChaCha streams, so
//! adding work to one stage never perturbs the numbers another stage sees:
//!
//! | stream | consumer                         |
//! |--------|----------------------------------|
//! | 0      | layout placement                 |
//! | 1      | activity details (cars)          |
//! | 2      | steam plume geometry             |
//!
//! Stage seeds inside a scenario are derived with [`derive_seed`], which
//! hashes `(scenario_seed, event_index, stage_name)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const LAYOUT_STREAM: u64 = 0;
pub const DETAIL_STREAM: u64 = 1;
pub const STEAM_STREAM: u64 = 2;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// First eight bytes (little endian) of
/// `SHA-256(le64(scenario_seed) || le64(event_index) || stage_name)`.
pub fn derive_seed(scenario_seed: u64, event_index: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(scenario_seed.to_le_bytes());
    h.update(event_index.to_le_bytes());
    h.update(stage.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Uniform value in `[0, 1)` hashed from integer coordinates; used for
/// lattice noise and other stateless draws.
pub fn hash_unit(seed: u64, a: i64, b: i64, c: i64) -> f64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a as u64, b as u64, c as u64] {
        x ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = splitmix(x);
    }
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
