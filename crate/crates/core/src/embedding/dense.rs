use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{tokenize, DenseVector, EmbeddingCache, EmbeddingError};
use crate::hashing::stable_u64;
use crate::http::{agent, credential, post_json, HttpFailure};

/// A backend that maps a batch of texts to raw (unnormalized) vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> String;
    fn model(&self) -> String;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Feature-hashing pseudo-embedding: each token adds ±1 to a bucket chosen
/// by its hash. Texts sharing tokens get high cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = stable_u64(&[token.as_bytes()]);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn provider_id(&self) -> String {
        "mock-hash".into()
    }

    fn model(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    /// Requests go to `{base_url}/embeddings`.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

/// Embeddings endpoint taking `{"model", "input": [texts]}` and returning
/// `{"data": [{"embedding": [...], "index": i}]}`.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let agent = agent(Duration::from_secs(config.timeout_secs));
        Self { config, agent }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn provider_id(&self) -> String {
        format!("http:{}", self.config.base_url)
    }

    fn model(&self) -> String {
        self.config.model.clone()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let key = credential(self.config.api_key_env.as_deref()).map_err(EmbeddingError::Provider)?;
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({"model": self.config.model, "input": texts});
        let value = post_json(&self.agent, &url, key.as_deref(), &body).map_err(|f| {
            EmbeddingError::Provider(match f {
                HttpFailure::Timeout => "request timed out".into(),
                HttpFailure::Transport(d) | HttpFailure::Decode(d) => d,
                HttpFailure::Status(s, body) => format!("HTTP {s}: {body}"),
            })
        })?;
        parse_embeddings(&value, texts.len())
    }
}

fn parse_embeddings(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    let bad = |msg: &str| EmbeddingError::Provider(format!("malformed embeddings response: {msg}"));
    let data = value.get("data").and_then(Value::as_array).ok_or_else(|| bad("no data array"))?;
    if data.len() != expected {
        return Err(bad(&format!("expected {expected} embeddings, got {}", data.len())));
    }
    let mut out: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("item without embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric component")))
            .collect::<Result<Vec<f64>, _>>()?;
        out.push((index, values));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, v)| v).collect())
}

/// Batching, normalizing, caching front end over an [`EmbeddingProvider`].
pub struct DenseEncoder {
    provider: Box<dyn EmbeddingProvider>,
    batch_size: usize,
    memory: Mutex<HashMap<String, DenseVector>>,
    disk: Option<Mutex<EmbeddingCache>>,
}

impl std::fmt::Debug for DenseEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseEncoder")
            .field("provider", &self.provider.provider_id())
            .field("model", &self.provider.model())
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

impl DenseEncoder {
    pub fn new(provider: Box<dyn EmbeddingProvider>, batch_size: usize) -> Self {
        Self {
            provider,
            batch_size: batch_size.max(1),
            memory: Mutex::new(HashMap::new()),
            disk: None,
        }
    }

    pub fn with_disk_cache(mut self, root: &Path) -> Result<Self, EmbeddingError> {
        let cache = EmbeddingCache::open(root, &self.provider.provider_id(), &self.provider.model())?;
        self.disk = Some(Mutex::new(cache));
        Ok(self)
    }

    pub fn provider_id(&self) -> String {
        self.provider.provider_id()
    }

    pub fn model(&self) -> String {
        self.provider.model()
    }

    /// One unit-norm vector per text, in order.
    pub fn encode(&self, texts: &[&str]) -> Result<Vec<DenseVector>, EmbeddingError> {
        let mut found: HashMap<&str, DenseVector> = HashMap::new();
        let mut misses: Vec<&str> = Vec::new();
        {
            let memory = self.memory.lock().expect("memory cache lock");
            for &t in texts {
                if found.contains_key(t) || misses.contains(&t) {
                    continue;
                }
                if let Some(v) = memory.get(t) {
                    found.insert(t, v.clone());
                } else if let Some(disk) = &self.disk {
                    match disk.lock().expect("disk cache lock").get(t)? {
                        Some(values) => {
                            found.insert(t, DenseVector::new(values));
                        }
                        None => misses.push(t),
                    }
                } else {
                    misses.push(t);
                }
            }
        }

        let mut expected_dim = found.values().next().map(DenseVector::dim);
        for batch in misses.chunks(self.batch_size) {
            let raw = self.provider.embed_batch(batch)?;
            if raw.len() != batch.len() {
                return Err(EmbeddingError::Provider(format!(
                    "requested {} embeddings, received {}",
                    batch.len(),
                    raw.len()
                )));
            }
            for (&text, values) in batch.iter().zip(raw) {
                let dim = *expected_dim.get_or_insert(values.len());
                if values.len() != dim || dim == 0 {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: dim,
                        got: values.len(),
                    });
                }
                let v = DenseVector::normalized(values);
                if let Some(disk) = &self.disk {
                    disk.lock().expect("disk cache lock").put(text, &v.values)?;
                }
                found.insert(text, v);
            }
        }

        let mut memory = self.memory.lock().expect("memory cache lock");
        for (t, v) in &found {
            memory.entry(t.to_string()).or_insert_with(|| v.clone());
        }
        texts
            .iter()
            .map(|t| {
                let v = found[t].clone();
                match expected_dim {
                    Some(d) if d != v.dim() => Err(EmbeddingError::DimensionMismatch {
                        expected: d,
                        got: v.dim(),
                    }),
                    _ => Ok(v),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{similarity, EmbeddingVector};
    use crate::http::testing::serve;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting {
        inner: HashEmbedder,
        calls: Arc<AtomicUsize>,
        texts: Arc<AtomicUsize>,
    }

    impl EmbeddingProvider for Counting {
        fn provider_id(&self) -> String {
            "counting".into()
        }
        fn model(&self) -> String {
            "c".into()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    struct Ragged;

    impl EmbeddingProvider for Ragged {
        fn provider_id(&self) -> String {
            "ragged".into()
        }
        fn model(&self) -> String {
            "r".into()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![1.0; i + 1]).collect())
        }
    }

    fn encoder() -> DenseEncoder {
        DenseEncoder::new(Box::new(HashEmbedder::new(64)), 16)
    }

    #[test]
    fn shape_and_normalization() {
        let out = encoder().encode(&["book a flight", "find a hotel", "weather"]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.dim() == 64 && (v.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn identical_texts_identical_vectors_and_cache_hits() {
        let calls = Arc::new(AtomicUsize::new(0));
        let texts = Arc::new(AtomicUsize::new(0));
        let enc = DenseEncoder::new(
            Box::new(Counting {
                inner: HashEmbedder::new(32),
                calls: calls.clone(),
                texts: texts.clone(),
            }),
            2,
        );
        let out = enc.encode(&["a b", "c", "a b", "d", "e"]).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(texts.load(Ordering::SeqCst), 4);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        enc.encode(&["a b"]).unwrap();
        assert_eq!(texts.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn disk_cache_survives_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let first = encoder().with_disk_cache(dir.path()).unwrap().encode(&["x y"]).unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let enc = DenseEncoder::new(
            Box::new(Counting {
                inner: HashEmbedder::new(64),
                calls: calls.clone(),
                texts: Arc::new(AtomicUsize::new(0)),
            }),
            4,
        );
        // Different provider id, so a separate namespace: misses.
        enc.with_disk_cache(dir.path()).unwrap().encode(&["x y"]).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let again = encoder().with_disk_cache(dir.path()).unwrap().encode(&["x y"]).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let enc = DenseEncoder::new(Box::new(Ragged), 8);
        assert!(matches!(
            enc.encode(&["a", "b"]),
            Err(EmbeddingError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn http_embedder_wire_format() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"data":[{"index":1,"embedding":[0.0,2.0]},{"index":0,"embedding":[3.0,4.0]}]}"#.into(),
        )]);
        let enc = DenseEncoder::new(
            Box::new(HttpEmbedder::new(HttpEmbedderConfig {
                base_url: url,
                model: "emb".into(),
                api_key_env: None,
                timeout_secs: 5,
            })),
            8,
        );
        let out = enc.encode(&["first", "second"]).unwrap();
        assert_eq!(out[0].values, [0.6, 0.8]);
        assert_eq!(out[1].values, [0.0, 1.0]);
        let req = rx.recv().unwrap();
        assert_eq!(req.request_line, "POST /embeddings HTTP/1.1");
        let body: Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(body["input"], json!(["first", "second"]));
        assert_eq!(body["model"], "emb");
    }

    #[test]
    fn http_embedder_error_status() {
        let (url, _rx) = serve(vec![(500, "{}".into())]);
        let e = HttpEmbedder::new(HttpEmbedderConfig {
            base_url: url,
            model: "emb".into(),
            api_key_env: None,
            timeout_secs: 5,
        });
        assert!(matches!(e.embed_batch(&["a"]), Err(EmbeddingError::Provider(_))));
    }

    proptest! {
        #[test]
        fn hash_mock_self_similarity_and_symmetry(a in "[a-z]{1,6}( [a-z]{1,6}){0,8}", b in "[a-z]{1,6}( [a-z]{1,6}){0,8}") {
            let out = encoder().encode(&[&a, &b]).unwrap();
            let va = EmbeddingVector::Dense(out[0].clone());
            let vb = EmbeddingVector::Dense(out[1].clone());
            let self_sim = similarity(&va, &va).unwrap();
            // Tokens can cancel in one bucket, leaving the zero vector.
            if out[0].norm() > 0.0 {
                prop_assert!((self_sim - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(similarity(&va, &vb).unwrap(), similarity(&vb, &va).unwrap());
        }
    }
}
