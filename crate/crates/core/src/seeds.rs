//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from one master seed through named
//! substreams, so per-receiver noise and per-trial samplers are independent
//! of evaluation order and worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; full-period mixer with good avalanche behavior.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit substream key for (`master`, `tag`, `index`).
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let mut state = master;
    let mut acc = splitmix(&mut state);
    for b in tag.bytes() {
        state ^= b as u64;
        acc ^= splitmix(&mut state);
    }
    state ^= index;
    acc ^ splitmix(&mut state)
}

/// Counter-based generator seeded from a substream key.
pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
