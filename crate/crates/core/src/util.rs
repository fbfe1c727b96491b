//! Small shared helpers: content digests and deterministic seed derivation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 of a file's contents, streamed.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Derives a child seed from a base seed and a list of purpose tags.
///
/// Different tag sequences yield independent streams, so fan-out sites
/// (children of a tree node, samples for a question, retries) never share a
/// random stream by accident. The derivation hashes the base seed and the
/// tags, making it stable across platforms and releases of the rand crate.
pub fn mix_seed(base: u64, tags: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for tag in tags {
        hasher.update([0xff]);
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha RNG seeded from a 64-bit seed, expanded by hashing.
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    let digest = Sha256::digest(seed.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// A ChaCha RNG keyed by arbitrary string material (e.g. a request digest).
pub fn rng_from_material(parts: &[&str]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update([0xfe]);
        hasher.update(part.as_bytes());
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha20Rng::from_seed(key)
}
