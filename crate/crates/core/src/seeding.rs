//! Stateless derivation of RNG keys from structured coordinates.
//!
//! Training and augmentation never share a sequential RNG; every random
//! decision is keyed by where it happens (seed, sample index, epoch, ...),
//! so resumed runs replay the exact same draws.

/// splitmix64 finalizer; full-period, well-mixed for consecutive inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Folds coordinates into one u64 key. Order-sensitive: (a, b) and (b, a)
/// give unrelated keys.
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut z = 0x243F6A8885A308D3; // arbitrary nonzero start
    for &p in parts {
        z = splitmix64(z ^ p);
    }
    z
}
