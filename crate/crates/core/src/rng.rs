//! Named, seeded random substreams.
//!
//! Every consumer of randomness asks for a stream by `(seed, purpose, index)`.
//! Two consumers that name the same triple see identical draws, which is how
//! the learner and all comparators share one disturbance realization.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha20 keyed by `seed`, stream selected by `(purpose, index)`.
pub fn substream(seed: u64, purpose: &str, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(fnv1a(purpose.as_bytes()) ^ splitmix(index)));
    rng
}
