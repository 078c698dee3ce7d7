//! Canonical JSON rendering and content hashing.
//!
//! Artifacts are stamped with a hash of their originating configuration so
//! that stages refuse to mix outputs produced under different settings.
//! Canonical form: object keys sorted (serde_json's default map is ordered),
//! floats in shortest round-trip notation, no insignificant whitespace.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Serialize a value to its canonical JSON string.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&tree)?)
}

/// Hex-encoded SHA-256 of a string.
pub fn sha256_hex(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Canonical-JSON content hash of any serializable value.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&canonical_json(value)?))
}
