//! Seedable 64-bit hash used for ring placement, lookups, and RNG stream
//! derivation.
//!
//! The algorithm is pinned so rings are reproducible across implementations:
//!
//! 1. FNV-1a over the input bytes, with the 64-bit offset basis XORed with
//!    the seed before absorbing any input:
//!    `h = 0xcbf29ce484222325 ^ seed`, then per byte `h = (h ^ b) * 0x100000001b3`
//!    (wrapping 64-bit multiply).
//! 2. The splitmix64 finalizer applied to the FNV state for avalanche:
//!    `x += 0x9e3779b97f4a7c15; x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9;
//!     x = (x ^ (x >> 27)) * 0x94d049bb133111eb; x ^= x >> 31`.
//!
//! Ring points hash the UTF-8 bytes of `"<node_id>#<replica_index>"`;
//! session lookups hash the UTF-8 bytes of the session id.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a followed by the splitmix64 finalizer.
pub fn seeded_hash64(seed: u64, data: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in data {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

/// splitmix64 finalizer.
pub fn mix64(x: u64) -> u64 {
    let mut x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of the ring point key `"<node_id>#<replica_index>"`.
pub fn point_hash(seed: u64, node_id: &str, replica: u32) -> u64 {
    let key = format!("{node_id}#{replica}");
    seeded_hash64(seed, key.as_bytes())
}
