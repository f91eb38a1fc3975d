use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EmbeddingError;
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheManifest {
    provider_id: String,
    model: String,
    dim: Option<usize>,
}

/// On-disk embedding cache.
///
/// Layout: `<root>/<sha256(provider_id, model)>/manifest.json` plus one
/// `<sha256(text)>.bin` file per entry holding little-endian f64 values.
/// Entries are written to a temp file and renamed into place, so concurrent
/// writers of the same key simply race to an identical result.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> EmbeddingError {
    EmbeddingError::Cache(format!("{}: {e}", path.display()))
}

impl EmbeddingCache {
    pub fn open(root: &Path, provider_id: &str, model: &str) -> Result<Self, EmbeddingError> {
        let ns = sha256_hex(format!("{provider_id}\u{0}{model}").as_bytes());
        let dir = root.join(&ns[..16]);
        fs::create_dir_all(&dir).map_err(|e| cache_err(&dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let raw = fs::read_to_string(&manifest_path).map_err(|e| cache_err(&manifest_path, e))?;
            let m: CacheManifest =
                serde_json::from_str(&raw).map_err(|e| cache_err(&manifest_path, e))?;
            if m.provider_id != provider_id || m.model != model {
                return Err(cache_err(&manifest_path, "manifest belongs to another provider"));
            }
            m
        } else {
            let m = CacheManifest {
                provider_id: provider_id.to_string(),
                model: model.to_string(),
                dim: None,
            };
            write_atomic(&manifest_path, serde_json::to_string_pretty(&m).unwrap().as_bytes())?;
            m
        };
        Ok(Self { dir, manifest })
    }

    pub fn dim(&self) -> Option<usize> {
        self.manifest.dim
    }

    fn entry_path(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.bin", sha256_hex(text.as_bytes())))
    }

    pub fn get(&self, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError> {
        let path = self.entry_path(text);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        if bytes.len() % 8 != 0 {
            return Err(cache_err(&path, "truncated entry"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(dim) = self.manifest.dim {
            if values.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
        }
        Ok(Some(values))
    }

    pub fn put(&mut self, text: &str, values: &[f64]) -> Result<(), EmbeddingError> {
        match self.manifest.dim {
            Some(dim) if dim != values.len() => {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: values.len(),
                })
            }
            Some(_) => {}
            None => {
                self.manifest.dim = Some(values.len());
                let path = self.dir.join("manifest.json");
                write_atomic(&path, serde_json::to_string_pretty(&self.manifest).unwrap().as_bytes())?;
            }
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&self.entry_path(text), &bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EmbeddingError> {
    static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp{}.{n}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| cache_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| cache_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| cache_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = EmbeddingCache::open(dir.path(), "p", "m").unwrap();
        assert_eq!(c.get("hello").unwrap(), None);
        c.put("hello", &[0.25, -1.5]).unwrap();
        assert_eq!(c.get("hello").unwrap(), Some(vec![0.25, -1.5]));

        let c2 = EmbeddingCache::open(dir.path(), "p", "m").unwrap();
        assert_eq!(c2.dim(), Some(2));
        assert_eq!(c2.get("hello").unwrap(), Some(vec![0.25, -1.5]));
    }

    #[test]
    fn dimension_fixed_after_first_put() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = EmbeddingCache::open(dir.path(), "p", "m").unwrap();
        c.put("a", &[1.0, 2.0]).unwrap();
        assert!(matches!(
            c.put("b", &[1.0]),
            Err(EmbeddingError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn providers_are_namespaced() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = EmbeddingCache::open(dir.path(), "p", "m1").unwrap();
        a.put("x", &[1.0]).unwrap();
        let b = EmbeddingCache::open(dir.path(), "p", "m2").unwrap();
        assert_eq!(b.get("x").unwrap(), None);
    }
}
