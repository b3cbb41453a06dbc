//! Named sub-streams derived from one global seed.
//!
//! Every random choice in an experiment (mask placement, weight init, batch
//! shuffling, synthetic data) draws from its own stream so that changing one
//! component's seed usage cannot perturb the others.

/// Derive a deterministic sub-seed for a named stream.
pub fn substream(global_seed: u64, name: &str) -> u64 {
    // FNV-1a over the stream name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = global_seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
