//! Content digests stamped on every output artifact.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest of a value's canonical TOML serialization.
pub fn of_toml<T: serde::Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("config types serialize to TOML");
    sha256_hex(text.as_bytes())
}
