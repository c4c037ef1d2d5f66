//! Seeded string hashing that does not depend on the toolchain's hasher.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the seed and the separated parts, finished with a splitmix
/// avalanche.
pub(crate) fn stable_hash<S: AsRef<str>>(seed: u64, parts: &[S]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    seed.to_le_bytes().into_iter().for_each(&mut feed);
    for p in parts {
        p.as_ref().bytes().for_each(&mut feed);
        feed(0xff);
    }
    mix(h)
}

/// Map a hash to `[0, 1)`.
pub(crate) fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}
