//! Counter-based seeding: every random stream is a pure function of
//! `(global seed, op id, step)`, so a run can be resumed at any step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, op_id: u64, step: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ op_id) ^ step.rotate_left(17))
}

pub fn stream(seed: u64, op_id: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, op_id, step))
}
