//! Deterministic seed derivation.

/// SplitMix64 finalizer; maps a seed and a stream index to a new seed.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold several stream components into one seed.
pub fn derive_all(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| derive(acc, p))
}
