//! Named, independently seeded random substreams.
//!
//! Every source of randomness in a run (data shuffling, attack starts, mixup
//! coefficients, dropout masks, ...) draws from its own stream derived from
//! the single run seed plus a label and optional indices. Consuming one stream
//! never perturbs another, which is what makes objective reductions (e.g.
//! dropping a loss term) leave the remaining trajectories bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A deterministic stream for `(seed, label, salts...)`.
pub fn stream(seed: u64, label: &str, salts: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ fnv1a(label));
    for &s in salts {
        state = splitmix(state ^ splitmix(s.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    ChaCha8Rng::seed_from_u64(state)
}
