//! Content-hash cache keys. A stage's key folds in its own parameters plus
//! the keys of everything upstream, so any upstream change invalidates the
//! chain.

use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct CacheKey {
    hasher_state: Vec<String>,
}

impl CacheKey {
    pub fn new(stage: &str) -> Self {
        CacheKey { hasher_state: vec![format!("stage={stage}")] }
    }

    pub fn field(mut self, name: &str, value: impl std::fmt::Display) -> Self {
        self.hasher_state.push(format!("{name}={value}"));
        self
    }

    pub fn bytes(mut self, name: &str, data: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(data);
        self.hasher_state.push(format!("{name}#{}", hex(&h.finalize())));
        self
    }

    /// Hex digest of the accumulated fields (order-sensitive).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in &self.hasher_state {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    pub fn short(&self) -> String {
        self.digest()[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of raw bytes, used for corpus fingerprints.
pub fn content_hash(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    hex(&h.finalize())
}

/// Resolve the cache directory: `PVLAB_CACHE` env override, else
/// `<out_dir>/cache`.
pub fn cache_dir(out_dir: &Path) -> PathBuf {
    match std::env::var_os("PVLAB_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out_dir.join("cache"),
    }
}
