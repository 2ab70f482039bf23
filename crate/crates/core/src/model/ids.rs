//! Content-derived identifiers.
//!
//! Every identifier in the engine is a digest of the content it names, so
//! re-running a stage over unchanged inputs reproduces the same ids.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hex length of record identifiers (128 bits).
pub const ID_HEX_LEN: usize = 32;

/// Full SHA-256 hex digest of raw bytes. Used as the image dedup key.
pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of an ordered list of text fields.
///
/// Each field is length-prefixed before hashing so that `["ab", "c"]` and
/// `["a", "bc"]` never collide.
pub fn content_digest<S: AsRef<str>>(parts: &[S]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref().as_bytes();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let mut hex = hex::encode(hasher.finalize());
    hex.truncate(ID_HEX_LEN);
    hex
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of an [`ImageRecord`](super::ImageRecord).
    ImageId
);
string_id!(
    /// Identifier of an [`InstructionRecord`](super::InstructionRecord).
    RecordId
);
string_id!(
    /// SHA-256 hex digest of image bytes.
    DedupKey
);
string_id!(SeedId);
string_id!(BatchId);
string_id!(TaskId);

impl DedupKey {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(bytes_digest(bytes))
    }
}

impl ImageId {
    /// Image ids are derived from the dedup key, so identical bytes always
    /// map to the same id.
    pub fn from_dedup_key(key: &DedupKey) -> Self {
        Self(content_digest(&["image", key.as_str()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_digest_is_fixed_length_and_deterministic() {
        let a = content_digest(&["img", "judgment", "Is it red?"]);
        let b = content_digest(&["img", "judgment", "Is it red?"]);
        assert_eq!(a, b);
        assert_eq!(a.len(), ID_HEX_LEN);
    }

    #[test]
    fn length_prefix_separates_fields() {
        assert_ne!(content_digest(&["ab", "c"]), content_digest(&["a", "bc"]));
    }

    #[test]
    fn bytes_digest_matches_known_vector() {
        assert_eq!(
            bytes_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
