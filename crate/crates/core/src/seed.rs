//! Seed derivation.
//!
//! Every random draw in the pipeline is seeded from one base seed expanded
//! through `derive(base, tag, parts)`: the tag names the consumer
//! (`"sft-batch"`, `"candidate"`, ...) and `parts` carry the indices that
//! distinguish draws (item index, candidate index, epoch, step). The mix is
//! FNV-1a over the tag followed by SplitMix64 finalization per part, so
//! derived seeds are stable across platforms and thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut s = splitmix(base ^ h);
    for &p in parts {
        s = splitmix(s ^ p);
    }
    s
}

pub fn rng(base: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, parts))
}
