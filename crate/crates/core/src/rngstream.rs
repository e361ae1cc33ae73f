//! Named deterministic random streams.
//!
//! Every sampling site derives its own stream from the master seed and a
//! key path (purpose plus entity ids). Streams are independent: adding a
//! new sampling site never perturbs existing ones, and two processes that
//! derive the same key (e.g. the simulator and a live node) draw identical
//! sequences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash;

/// Byte that joins key parts; keeps ("ab","c") and ("a","bc") distinct.
const SEPARATOR: u8 = 0x1f;

pub fn derive_rng(master_seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(parts.iter().map(|p| p.len() + 1).sum());
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            key.push(SEPARATOR);
        }
        key.extend_from_slice(part.as_bytes());
    }
    ChaCha8Rng::seed_from_u64(hash::seeded_hash64(master_seed, &key))
}
