//! Named, seed-derived random streams.
//!
//! Every consumer of randomness (weight init, data generation, box jitter,
//! batch order) draws from its own stream so that changing one consumer
//! never perturbs another; paired ablation runs rely on this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    indexed(seed, name, 0)
}

pub fn indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(seed ^ fnv1a(name.as_bytes())) ^ splitmix(index.wrapping_add(1)));
    ChaCha8Rng::seed_from_u64(s)
}
