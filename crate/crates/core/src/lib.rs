pub mod allocator;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod mlu;
pub mod plant;
pub mod quantizer;
pub mod riccati;
pub mod scenario;

pub use error::{Error, Result};

/// Hex SHA-256 of `bytes`, used for config hashes and model fingerprints.
pub fn fingerprint(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    format!("{:x}", Sha256::digest(bytes))
}
