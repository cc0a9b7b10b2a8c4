//! Named random substreams.
//!
//! Every random draw in the pipeline comes from a stream keyed by
//! `(seed, name, indices...)`, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from a root seed, a stream name and indices.
pub fn substream(seed: u64, name: &str, indices: &[u64]) -> Stream {
    // FNV-1a over the name keeps keys stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key = splitmix(seed ^ splitmix(h));
    for &i in indices {
        key = splitmix(key ^ splitmix(i.wrapping_add(0x51_7cc1_b727_220a)));
    }
    ChaCha8Rng::seed_from_u64(key)
}
