//! Deterministic seed derivation.
//!
//! Every source of randomness in a run (network init, each episode's world
//! seed, each episode's action sampling, each epoch's minibatch shuffle, …)
//! draws from its own stream, derived from the master seed plus a purpose tag
//! and indices. Streams never share state, so adding a consumer (say, a cost
//! critic) cannot shift any other stream — that independence is what makes
//! runs reproduce byte-for-byte across worker counts and across variants that
//! differ only in which components exist.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes, so distinct purposes land in distinct streams.
fn tag_hash(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `(master, tag, a, b)`.
pub fn derive_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut z = mix(master ^ tag_hash(tag));
    z = mix(z ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    mix(z ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
}

/// A ChaCha generator for the derived stream `(master, tag, a, b)`.
pub fn stream(master: u64, tag: &str, a: u64, b: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag, a, b))
}
