//! SHA-256 digests used for provenance.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the compact JSON encoding of `value`.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    // Serializing plain data structures into a Vec cannot fail.
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}
