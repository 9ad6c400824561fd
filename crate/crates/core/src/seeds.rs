/// Mixes a base seed with a path of integers (SplitMix64 finaliser per step),
/// so that e.g. `(seed, epoch, sequence)` yields independent streams.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x9E37_79B9_7F4A_7C15);
    for &p in path {
        h = mix(h ^ mix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a), used to key per-sequence seeds.
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
