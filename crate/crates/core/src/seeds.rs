//! Deterministic seed derivation. Every random stream in the pipeline is
//! derived from one master seed through these functions.

/// SplitMix64 finalizer over `seed ⊕ golden·(index + 1)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream called `name` under `master`.
pub fn named_seed(master: u64, name: &str) -> u64 {
    // FNV-1a of the name
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    mix_seed(master, h)
}
