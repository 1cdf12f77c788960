//! Counter-based derivation of independent random streams from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of tags into `seed`. The result depends only on the
/// inputs, so streams for different tags never depend on scheduling.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

/// Hash of a variable set, used to key per-node streams.
pub fn set_tag(vars: &[usize]) -> u64 {
    let mut h = 0x51_7C_C1_B7_27_22_0A_95u64;
    for &v in vars {
        h = splitmix64(h ^ (v as u64 + 1));
    }
    h
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Stream purposes; kept distinct so per-node streams never collide.
pub(crate) const TAG_PROJECTION: u64 = 1;
pub(crate) const TAG_COLUMNS: u64 = 2;
pub(crate) const TAG_BASIS: u64 = 3;
pub(crate) const TAG_ROOT: u64 = 4;
pub(crate) const TAG_RANK: u64 = 5;
pub(crate) const TAG_PAIRING: u64 = 6;
pub(crate) const TAG_TRIAL: u64 = 7;
pub(crate) const TAG_TEST: u64 = 8;
pub(crate) const TAG_TREE: u64 = 9;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(set_tag(&[0, 1]), set_tag(&[1, 0]));
    }
}
