//! Deterministic RNG derivation.
//!
//! All randomness in the crate flows from a single root seed through
//! [`child_rng`]. Each logical sampling task (a phase, an entry, a replicate)
//! derives its own stream from the root seed and a short tag path, so results
//! are reproducible bit-for-bit regardless of thread scheduling and individual
//! tasks can run in parallel without sharing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a 64-bit value into a well-distributed successor (splitmix64 step).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a fresh root seed for the subtask identified by `tags`. Use this
/// to hand a nested component its own seed; use [`child_rng`] to draw values.
pub fn child_seed(root: u64, tags: &[u64]) -> u64 {
    let mut state = mix(root ^ 0x6c62_272e_07bb_0142);
    for (i, &t) in tags.iter().enumerate() {
        state = mix(state ^ mix(t.wrapping_add(i as u64 + 1)));
    }
    state
}

/// Derives an independent generator for the task identified by `tags`,
/// rooted at `root`. Equal inputs give equal streams; any change to the
/// root or to one tag gives an unrelated stream.
pub fn child_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = child_seed(root, tags);
    let mut seed = [0u8; 32];
    for (chunk_idx, chunk) in seed.chunks_mut(8).enumerate() {
        state = mix(state ^ (chunk_idx as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
