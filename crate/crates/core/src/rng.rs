//! Named, reproducible random substreams.
//!
//! A run is seeded once. Every stochastic component (batch drawing,
//! reservoir insertion, admission coin flips, disk sampling, weight init)
//! takes its own ChaCha stream selected by name, so adding draws to one
//! component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const MODEL_INIT: &str = "model-init";
pub const BATCHES: &str = "batches";
pub const RESERVOIR: &str = "reservoir";
pub const ADMISSION: &str = "admission";
pub const OFFLINE: &str = "offline";

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
fn stream_id(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
