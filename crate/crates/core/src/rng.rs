//! Child-RNG derivation. Every randomized consumer derives its own generator
//! from (root seed, purpose label, counter), so adding a consumer never
//! perturbs the draws of another and any point in a run can be reproduced
//! from the seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a deterministic generator for one purpose at one step of a run.
/// The label is truncated to 16 bytes; all internal labels are short and
/// distinct well before that.
pub fn derive_rng(seed: u64, label: &str, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&counter.to_le_bytes());
    let bytes = label.as_bytes();
    let n = bytes.len().min(16);
    key[16..16 + n].copy_from_slice(&bytes[..n]);
    ChaCha8Rng::from_seed(key)
}
