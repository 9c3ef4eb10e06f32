//! Deterministic stand-in for an image search engine.
//!
//! Results for `(keyword, rank)` are a pure function of the seed. Every payload
//! carries a concept id derived from `(seed, keyword)` so that stub features
//! built from it are learnable downstream.
//!
//! Payload layout (48 bytes): magic `SSMMTFX1`, concept id (u32 LE), rank
//! (u32 LE), then `SHA-256("ssmmt/fixture/payload" | seed LE | len(keyword) LE
//! u64 | keyword | rank LE u32)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"SSMMTFX1";
pub const PAYLOAD_LEN: usize = 48;

/// Concept id shared by every image returned for `keyword`.
pub fn concept_of(seed: u64, keyword: &str, n_concepts: u32) -> u32 {
    let mut h = Sha256::new();
    h.update(b"ssmmt/fixture/concept");
    h.update(seed.to_le_bytes());
    h.update(keyword.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v % u64::from(n_concepts.max(1))) as u32
}

pub fn payload(seed: u64, keyword: &str, rank: u32, n_concepts: u32) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"ssmmt/fixture/payload");
    h.update(seed.to_le_bytes());
    h.update((keyword.len() as u64).to_le_bytes());
    h.update(keyword.as_bytes());
    h.update(rank.to_le_bytes());
    let digest = h.finalize();
    let mut out = Vec::with_capacity(PAYLOAD_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&concept_of(seed, keyword, n_concepts).to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&digest);
    out
}

/// Concept id embedded in a fixture payload, if it is one.
pub fn payload_concept(bytes: &[u8]) -> Option<u32> {
    if bytes.len() < PAYLOAD_LEN || &bytes[..8] != MAGIC {
        return None;
    }
    Some(u32::from_le_bytes(bytes[8..12].try_into().ok()?))
}

pub fn source(seed: u64) -> String {
    format!("fixture:{seed}")
}

/// The first `k` results for `keyword`, in rank order.
pub fn results(seed: u64, keyword: &str, k: usize, n_concepts: u32) -> Vec<(Vec<u8>, String)> {
    (0..k as u32).map(|r| (payload(seed, keyword, r, n_concepts), source(seed))).collect()
}
