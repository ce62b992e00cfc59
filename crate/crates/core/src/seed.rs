//! Seed fan-out.
//!
//! A single master seed is split into independent streams by purpose tag
//! (`"data"`, `"init"`, `"select"`, `"local"`, ...) and optional integer
//! coordinates such as `(round, client)`. The derivation is
//! `splitmix(master ^ fnv1a(tag))` followed by one splitmix round per
//! coordinate, so it is stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tag: &str, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(master ^ fnv1a(tag.as_bytes())), |acc, &c| {
            splitmix(acc ^ splitmix(c))
        })
}

pub fn rng(master: u64, tag: &str, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(master, tag, coords))
}
