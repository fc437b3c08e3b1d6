//! Keyed derivation of independent generator streams from one master seed.
//!
//! Every stochastic step in the crate draws from a ChaCha stream whose key is
//! a SHA-256 digest of the master seed, a domain tag and the caller's
//! coordinates (party, bin, group, repetition, ...). Streams for distinct
//! coordinates are therefore independent and their outputs do not depend on
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn digest(master: u64, domain: &str, parts: &[u64], extra: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pprl-stream/v1");
    h.update(master.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    h.update((extra.len() as u64).to_le_bytes());
    h.update(extra);
    h.finalize().into()
}

/// Generator for the stream identified by `(master, domain, parts)`.
pub fn stream(master: u64, domain: &str, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(digest(master, domain, parts, &[]))
}

/// Like [`stream`], with an additional byte-string coordinate such as a bin label.
pub fn stream_with_bytes(master: u64, domain: &str, parts: &[u64], extra: &[u8]) -> StreamRng {
    ChaCha8Rng::from_seed(digest(master, domain, parts, extra))
}

/// Child seed for handing to another component.
pub fn derive_seed(master: u64, domain: &str, parts: &[u64]) -> u64 {
    let d = digest(master, domain, parts, &[]);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
