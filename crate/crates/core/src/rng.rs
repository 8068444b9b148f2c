//! Named random substreams.
//!
//! Every component draws from its own ChaCha stream derived from a single
//! run seed, so re-seeding one component never perturbs another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream_id(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for the substream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// A child seed for the substream `name` of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).next_u64()
}
