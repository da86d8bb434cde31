//! Named, seeded random substreams.
//!
//! Every random draw in the crate comes from a [`substream`] derived from one
//! root seed, a stream name, and an index. Streams with different names or
//! indices are independent, so per-agent work can run in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn substream(root: u64, name: &str, index: u64) -> StreamRng {
    let seed = splitmix64(splitmix64(root ^ fnv1a(name.as_bytes())) ^ splitmix64(index.wrapping_add(1)));
    ChaCha8Rng::seed_from_u64(seed)
}
