//! Content hashes used to key caches and stamp API responses.

use sha2::{Digest, Sha256};

/// 64-bit content hash, the leading eight bytes of SHA-256, as 16 hex digits.
pub fn content_hash64(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    to_hex(&digest[..8])
}

/// Incremental variant of [`content_hash64`] over several byte slices.
#[derive(Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: impl AsRef<[u8]>) {
        self.0.update(bytes.as_ref());
    }

    pub fn finish(self) -> String {
        let digest = self.0.finalize();
        to_hex(&digest[..8])
    }
}

fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
