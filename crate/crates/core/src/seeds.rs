//! Deterministic seed derivation.
//!
//! One master seed fans out to independent per-component streams so that
//! subsystems (replicates, chains, monthly fits) are reproducible in
//! isolation and unaffected by evaluation order or parallelism. The
//! derivation is a fixed FNV-1a hash of the component name mixed with the
//! index through SplitMix64, so it is stable across platforms and releases.

/// Derives a child seed from `(master, component, index)`.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a offset basis
    for b in component.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
