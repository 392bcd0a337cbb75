//! Stable hashing for per-record seeds and request keys.
//!
//! `std`'s hasher is not guaranteed stable across releases, so everything
//! that must be reproducible goes through SHA-256 instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// SHA-256 over the parts, each terminated by a NUL so boundaries matter.
pub fn digest(parts: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

pub fn hex_digest(parts: &[&str]) -> String {
    digest(parts).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn stable_hash(parts: &[&str]) -> u64 {
    let bytes = digest(parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Generator for one record: `seed ⊕ hash(parts)`, independent of the
/// order in which records are processed.
pub fn record_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(parts))
}
