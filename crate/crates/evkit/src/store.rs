//! Content-addressed on-disk cache for extracted feature vectors.
//!
//! The key hashes together the image bytes, the canonical feature-spec text
//! and the backbone digest, so any change to any of the three produces a new
//! entry. Each entry is a raw little-endian f32 payload plus a small JSON
//! sidecar; writes go through a temp file and an atomic rename so concurrent
//! readers never observe a partial entry.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features_global::FeatureSpec;

/// sha256 hex digest of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(bytes_digest(&bytes))
}

/// sha256 hex digest of a byte slice.
pub fn bytes_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key for (image, feature spec, backbone) — collisions would require
/// a sha256 collision.
pub fn cache_key(image_digest: &str, spec: &FeatureSpec, backbone_digest: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image_digest.as_bytes());
    hasher.update([0u8]);
    hasher.update(spec.canonical().as_bytes());
    hasher.update([0u8]);
    hasher.update(backbone_digest.as_bytes());
    hex(&hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    key: String,
    dim: usize,
    spec: String,
    image_id: String,
}

/// A feature vector staged for the cache.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub key: String,
    pub spec: String,
    pub image_id: String,
    pub values: Vec<f32>,
}

/// Result of a cache probe. Corrupt entries carry a diagnostic and are
/// treated as misses by callers (triggering recomputation), never as data.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(Vec<f32>),
    Miss,
    Corrupt(String),
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<FeatureCache> {
        fs::create_dir_all(dir).map_err(|e| {
            Error::Cache(format!("cannot create cache directory {}: {e}", dir.display()))
        })?;
        Ok(FeatureCache { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn payload_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.f32"))
    }

    fn sidecar_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn write_atomic(&self, target: &Path, bytes: &[u8]) -> Result<()> {
        let tag = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = target.with_extension(format!("tmp-{}-{tag}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, target)?;
        Ok(())
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let mut payload = Vec::with_capacity(entry.values.len() * 4);
        for v in &entry.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.write_atomic(&self.payload_path(&entry.key), &payload)?;
        let sidecar = Sidecar {
            key: entry.key.clone(),
            dim: entry.values.len(),
            spec: entry.spec.clone(),
            image_id: entry.image_id.clone(),
        };
        self.write_atomic(&self.sidecar_path(&entry.key), &serde_json::to_vec_pretty(&sidecar)?)
    }

    pub fn get(&self, key: &str) -> CacheLookup {
        let sidecar_path = self.sidecar_path(key);
        let payload_path = self.payload_path(key);
        let sidecar_bytes = match fs::read(&sidecar_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(format!("{}: {e}", sidecar_path.display())),
        };
        let sidecar: Sidecar = match serde_json::from_slice(&sidecar_bytes) {
            Ok(s) => s,
            Err(e) => {
                return CacheLookup::Corrupt(format!(
                    "unparsable sidecar {}: {e}",
                    sidecar_path.display()
                ))
            }
        };
        let payload = match fs::read(&payload_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(format!("{}: {e}", payload_path.display())),
        };
        if payload.len() != sidecar.dim * 4 {
            return CacheLookup::Corrupt(format!(
                "{}: payload is {} bytes but the sidecar says dim {} ({} bytes)",
                payload_path.display(),
                payload.len(),
                sidecar.dim,
                sidecar.dim * 4
            ));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        CacheLookup::Hit(values)
    }
}
