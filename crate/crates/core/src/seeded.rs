//! Seeded, machine-independent randomness.
//!
//! Every stochastic step in the pipeline (subsampling, distractor draws,
//! weight init, dropout masks) flows through this module so results are
//! reproducible across platforms and releases. The sampler identity is
//! recorded in output metadata; bumping the algorithm means bumping
//! [`SAMPLER_ID`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Name of the sampling scheme written into manifests and sidecars.
pub const SAMPLER_ID: &str = "sha256-chacha8/fisher-yates/v1";

/// ChaCha8 stream keyed by a seed alone.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ChaCha8 stream keyed by a seed plus a domain string, so independent
/// pipeline steps sharing one global seed draw from unrelated streams.
pub fn rng_for(seed: u64, domain: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(domain.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Unbiased integer in [0, bound) via rejection sampling.
pub fn uniform_index(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    assert!(bound > 0, "uniform_index bound must be positive");
    let bound = bound as u64;
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % bound) as usize;
        }
    }
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli draw; exact at p = 0.0 and p = 1.0.
pub fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    uniform_unit(rng) < p
}

/// In-place Fisher-Yates shuffle driven by the caller's stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// First `n` elements of a seeded permutation of 0..len: a without-replacement
/// sample in draw order.
pub fn sample_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    assert!(n <= len, "sample_indices: n exceeds population");
    let mut idx: Vec<usize> = (0..len).collect();
    // Partial Fisher-Yates from the front: position i receives a uniform
    // choice from the remaining suffix.
    for i in 0..n {
        let j = i + uniform_index(rng, len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Stable 64-bit value derived from a seed and a domain string, for
/// forwarding as a sub-seed (e.g. per-request seeds sent to a server).
pub fn derive_u64(seed: u64, domain: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([1u8]);
    h.update(domain.as_bytes());
    let digest = h.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(eight)
}

/// SHA-256 of arbitrary bytes as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
