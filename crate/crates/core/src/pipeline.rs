//! Configuration-driven orchestration of the offline and online stages.
//!
//! Every artifact lives under `work_dir` in a directory named after a hash
//! of the inputs that determine it, so changing a setting never clobbers an
//! earlier result and re-running a command with the same settings reuses
//! what is already there:
//!
//! ```text
//! work_dir/
//!   corpus.jsonl                     normalized corpus
//!   expansions/<key>/expansions.jsonl
//!   indexes/reinvoke-<key>/          manifest.json + vectors.bin
//!   indexes/raw-<key>/               unexpanded baseline indexes
//!   runs/<key>/<method>.run          run files (+ intents.jsonl)
//!   reports/<key>/report.{json,txt}
//!   cache/embeddings/                dense embedding cache
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{
    load_corpus, load_eval_dataset_lenient, Corpus, CorpusError, CorpusFormat, EvalExample,
    ExcludedQuery,
};
use crate::embedding::{
    DenseEncoder, EmbeddingError, EmbeddingProvider, Encoder, EncoderKind, HashEmbedder,
    HttpEmbedder, HttpEmbedderConfig, DEFAULT_B, DEFAULT_K1,
};
use crate::eval::{format_table, roundtrip_reports, EvalError, EvalReport, MethodEvaluation, Metric};
use crate::expansion::{
    expanded_corpus, generate_copies, load_expansions, save_expansions, ExpansionError,
    ExpansionMode, ExpansionRecord, GenerationParams, DEFAULT_QUERIES_PER_DOC, DEFAULT_TEMPERATURE,
};
use crate::hashing::sha256_hex;
use crate::index::{build_index, build_raw_index, Aggregation, IndexError, IndexManifest, ToolIndex};
use crate::intent::{save_intents, Intent, IntentError, IntentParams, DEFAULT_MAX_INTENTS};
use crate::llm::{
    HttpGenerator, HttpGeneratorConfig, LlmClient, MockBehavior, MockGenerator, RetryPolicy,
    DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MAX_RETRIES,
};
use crate::rank::RankedDoc;
use crate::retrieve::{EncodedIndex, Explanation, IntentSource, Method, RetrievalResult, RetrieveError, Retriever};
use crate::runfile::{read_run, write_run, RankedList, RunFileError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no corpus configured")]
    NoCorpus,
    #[error("no dataset configured")]
    NoDataset,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    RunFile(#[from] RunFileError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no synthetic queries for m = {m}; run `expand` first")]
    EmptyExpansion { m: u32 },
    #[error("document `{doc_id}` has {have} of {m} synthetic queries; run `expand` first")]
    IncompleteExpansion { doc_id: String, have: usize, m: u32 },
    #[error("no index at {0}; run `index` first")]
    MissingIndex(String),
    #[error("run file not found: {0}")]
    MissingRun(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Text generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case")]
pub enum GenerationSettings {
    Mock {
        #[serde(default = "default_mock_behavior")]
        behavior: MockBehavior,
    },
    Http(HttpGeneratorConfig),
}

fn default_mock_behavior() -> MockBehavior {
    MockBehavior::ByStage { terms: 8 }
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings::Mock {
            behavior: default_mock_behavior(),
        }
    }
}

/// Dense embedding backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case")]
pub enum EmbeddingSettings {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
    },
    Http(HttpEmbedderConfig),
}

fn default_mock_dim() -> usize {
    256
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings::Mock {
            dim: default_mock_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    /// JSONL evaluation set (`query_id`, `query`, `relevant_ids`, optional `grades`).
    pub dataset: Option<PathBuf>,
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Synthetic queries per document; 0 indexes the raw documents.
    pub m: u32,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: u64,
    pub expansion_mode: ExpansionMode,
    /// When false the raw query is the single intent.
    pub intents: bool,
    pub max_intents: usize,
    /// Retrieval depth written to run files.
    pub k: usize,
    /// Evaluation cut-offs.
    pub ks: Vec<usize>,
    pub encoder: EncoderKind,
    pub aggregation: Aggregation,
    pub methods: Vec<Method>,
    /// Bound on concurrent provider calls and query workers.
    pub jobs: usize,
    pub max_retries: u32,
    pub embed_batch_size: usize,
    pub generation: GenerationSettings,
    pub embedding: EmbeddingSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: CorpusFormat::Jsonl,
            dataset: None,
            work_dir: PathBuf::from("reinvoke-work"),
            cache_dir: None,
            m: DEFAULT_QUERIES_PER_DOC,
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed: 0,
            expansion_mode: ExpansionMode::Append,
            intents: true,
            max_intents: DEFAULT_MAX_INTENTS,
            k: 10,
            ks: vec![1, 5, 10],
            encoder: EncoderKind::Bm25,
            aggregation: Aggregation::Mean,
            methods: vec![Method::Reinvoke, Method::Bm25],
            jobs: 4,
            max_retries: DEFAULT_MAX_RETRIES,
            embed_batch_size: 64,
            generation: GenerationSettings::default(),
            embedding: EmbeddingSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_relative_to(base);
        Ok(config)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.as_mut().map(fix);
        self.dataset.as_mut().map(fix);
        fix(&mut self.work_dir);
        self.cache_dir.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be within [0, 2]");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive integers");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.jobs == 0 || self.embed_batch_size == 0 {
            return bad("jobs and embed_batch_size must be positive");
        }
        if self.max_intents == 0 {
            return bad("max_intents must be positive");
        }
        if matches!(self.embedding, EmbeddingSettings::Mock { dim: 0 }) {
            return bad("mock embedding dim must be positive");
        }
        Ok(())
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.work_dir.join("cache"))
    }

    fn generator_id(&self) -> String {
        match &self.generation {
            GenerationSettings::Mock { behavior } => {
                format!("mock:{}", serde_json::to_string(behavior).expect("serializable"))
            }
            GenerationSettings::Http(c) => format!("http:{}@{}", c.model, c.base_url),
        }
    }

    fn encoder_id(&self, kind: EncoderKind) -> String {
        match (kind, &self.embedding) {
            (EncoderKind::Bm25, _) => format!("bm25:k1={DEFAULT_K1},b={DEFAULT_B}"),
            (EncoderKind::Dense, EmbeddingSettings::Mock { dim }) => format!("dense:mock-hash:{dim}"),
            (EncoderKind::Dense, EmbeddingSettings::Http(c)) => {
                format!("dense:http:{}@{}", c.model, c.base_url)
            }
        }
    }

    fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            base_seed: self.seed,
            parallelism: self.jobs,
            ..GenerationParams::default()
        }
    }

    fn intent_params(&self) -> IntentParams {
        IntentParams {
            max_intents: self.max_intents,
            ..IntentParams::default()
        }
    }

    fn needs_raw(&self, kind: EncoderKind) -> bool {
        let baseline = match kind {
            EncoderKind::Bm25 => Method::Bm25,
            EncoderKind::Dense => Method::Dense,
        };
        self.methods.contains(&baseline) || (self.methods.contains(&Method::Hyde) && self.encoder == kind)
    }
}

fn short_hash(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..16].to_string()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("slots lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slots lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizeSummary {
    pub path: PathBuf,
    pub documents: usize,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpandSummary {
    pub path: PathBuf,
    pub documents: usize,
    /// Copies generated by this invocation.
    pub generated: usize,
    /// Copies already present and skipped.
    pub skipped: usize,
    /// Generated copies that fell back to the document text.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltIndex {
    pub label: String,
    pub dir: PathBuf,
    pub manifest: IndexManifest,
    /// False when an identical index already existed.
    pub rebuilt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveSummary {
    pub run_dir: PathBuf,
    pub files: Vec<(Method, PathBuf)>,
    pub queries: usize,
    pub excluded: Vec<ExcludedQuery>,
}

/// Serialized evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub query_count: usize,
    pub excluded_queries: Vec<ExcludedQuery>,
    /// Run-file queries not in the (filtered) dataset; ignored.
    pub ignored_run_queries: usize,
    pub averaging: String,
    pub methods: Vec<MethodEvaluation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutcome {
    pub report: EvaluationReport,
    pub text: String,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripOutcome {
    pub reports: Vec<EvalReport>,
    pub text: String,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
}

/// The configured pipeline over a loaded corpus.
pub struct Pipeline {
    config: PipelineConfig,
    corpus: Corpus,
    dense: Mutex<Option<Encoder>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let path = config.corpus.clone().ok_or(PipelineError::NoCorpus)?;
        let corpus = load_corpus(&path, config.corpus_format)?;
        if let Err(e) = corpus.check_render_injective() {
            log::warn!("{e}");
        }
        Ok(Self {
            config,
            corpus,
            dense: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn client(&self) -> LlmClient {
        let c = &self.config;
        match &c.generation {
            GenerationSettings::Mock { behavior } => LlmClient::new(
                Arc::new(MockGenerator::new(behavior.clone())),
                RetryPolicy::no_backoff(c.max_retries),
            ),
            GenerationSettings::Http(h) => LlmClient::new(
                Arc::new(HttpGenerator::new(h.clone())),
                RetryPolicy {
                    max_retries: c.max_retries,
                    ..RetryPolicy::default()
                },
            ),
        }
    }

    pub fn encoder(&self, kind: EncoderKind) -> Result<Encoder> {
        if kind == EncoderKind::Bm25 {
            return Ok(Encoder::bm25());
        }
        let mut slot = self.dense.lock().expect("encoder lock");
        if let Some(enc) = slot.as_ref() {
            return Ok(enc.clone());
        }
        let provider: Box<dyn EmbeddingProvider> = match &self.config.embedding {
            EmbeddingSettings::Mock { dim } => Box::new(HashEmbedder::new(*dim)),
            EmbeddingSettings::Http(h) => Box::new(HttpEmbedder::new(h.clone())),
        };
        let dense = DenseEncoder::new(provider, self.config.embed_batch_size)
            .with_disk_cache(&self.config.cache_root().join("embeddings"))?;
        let enc = Encoder::Dense(Arc::new(dense));
        *slot = Some(enc.clone());
        Ok(enc)
    }

    // ----- artifact locations -------------------------------------------

    fn expansion_key(&self) -> String {
        let c = &self.config;
        short_hash(&json!({
            "corpus": self.corpus.content_hash(),
            "generator": c.generator_id(),
            "temperature": c.temperature,
            "max_output_tokens": c.max_output_tokens,
            "seed": c.seed,
            "empty_retries": GenerationParams::default().empty_retries,
        }))
    }

    pub fn expansion_path(&self) -> PathBuf {
        self.config
            .work_dir
            .join("expansions")
            .join(self.expansion_key())
            .join("expansions.jsonl")
    }

    pub fn reinvoke_index_dir(&self) -> PathBuf {
        let c = &self.config;
        let source = if c.m == 0 { "raw".to_string() } else { self.expansion_key() };
        let key = short_hash(&json!({
            "corpus": self.corpus.content_hash(),
            "source": source,
            "m": c.m,
            "mode": c.expansion_mode,
            "encoder": c.encoder_id(c.encoder),
            "aggregation": c.aggregation,
        }));
        c.work_dir.join("indexes").join(format!("reinvoke-{key}"))
    }

    pub fn raw_index_dir(&self, kind: EncoderKind) -> PathBuf {
        let key = short_hash(&json!({
            "corpus": self.corpus.content_hash(),
            "encoder": self.config.encoder_id(kind),
        }));
        self.config.work_dir.join("indexes").join(format!("raw-{key}"))
    }

    fn dataset_path(&self) -> Result<PathBuf> {
        self.config.dataset.clone().ok_or(PipelineError::NoDataset)
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        let c = &self.config;
        let dataset = self.dataset_path()?;
        let bytes = fs::read(&dataset).map_err(io_err(&dataset))?;
        let uses_llm = c.intents || c.methods.contains(&Method::Hyde);
        let key = short_hash(&json!({
            "reinvoke_index": self.reinvoke_index_dir().file_name().map(|s| s.to_string_lossy().into_owned()),
            "raw_bm25": self.raw_index_dir(EncoderKind::Bm25).file_name().map(|s| s.to_string_lossy().into_owned()),
            "raw_dense": self.raw_index_dir(EncoderKind::Dense).file_name().map(|s| s.to_string_lossy().into_owned()),
            "hyde_encoder": c.encoder,
            "intents": c.intents,
            "max_intents": c.max_intents,
            "generator": if uses_llm { c.generator_id() } else { String::new() },
            "k": c.k,
            "dataset": sha256_hex(&bytes),
        }));
        Ok(c.work_dir.join("runs").join(key))
    }

    // ----- commands -----------------------------------------------------

    /// Writes the corpus as canonical JSONL (default `<work_dir>/corpus.jsonl`).
    pub fn normalize(&self, out: Option<&Path>) -> Result<NormalizeSummary> {
        let path = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.work_dir.join("corpus.jsonl"));
        write_atomic(&path, self.corpus.canonical_jsonl().as_bytes())?;
        Ok(NormalizeSummary {
            path,
            documents: self.corpus.len(),
            corpus_hash: self.corpus.content_hash(),
        })
    }

    /// Generates synthetic queries `1..=m` for every document, skipping
    /// (doc_id, copy_index) pairs already on disk.
    pub fn expand(&self) -> Result<ExpandSummary> {
        let c = &self.config;
        let path = self.expansion_path();
        let mut records = if path.exists() {
            load_expansions(&path)?
        } else {
            Vec::new()
        };
        let mut have: HashSet<(String, u32)> = records
            .iter()
            .map(|r| (r.doc_id.clone(), r.copy_index))
            .collect();
        let params = c.generation_params();
        let client = self.client();
        let mut summary = ExpandSummary {
            path: path.clone(),
            documents: self.corpus.len(),
            generated: 0,
            skipped: 0,
            fallbacks: 0,
        };
        let mut unsaved = 0;
        let total = self.corpus.len();
        for (i, doc) in self.corpus.documents.iter().enumerate() {
            let missing: Vec<u32> = (1..=c.m)
                .filter(|ci| !have.contains(&(doc.doc_id.clone(), *ci)))
                .collect();
            summary.skipped += c.m as usize - missing.len();
            if missing.is_empty() {
                continue;
            }
            let queries = match generate_copies(doc, &missing, &params, &client) {
                Ok(q) => q,
                Err(e) => {
                    if unsaved > 0 {
                        save_expansions(&path, &self.corpus, &records)?;
                    }
                    return Err(e.into());
                }
            };
            for q in &queries {
                summary.fallbacks += usize::from(q.fallback);
                have.insert((q.doc_id.clone(), q.copy_index));
                records.push(ExpansionRecord::from_query(doc, q));
            }
            summary.generated += queries.len();
            unsaved += 1;
            log::info!("expanded {}/{} documents", i + 1, total);
            if unsaved >= 25 {
                self.save_expansion_file(&path, &records)?;
                unsaved = 0;
            }
        }
        if unsaved > 0 || !path.exists() {
            self.save_expansion_file(&path, &records)?;
        }
        Ok(summary)
    }

    fn save_expansion_file(&self, path: &Path, records: &[ExpansionRecord]) -> Result<()> {
        let dir = path.parent().expect("expansion file has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = json!({
            "corpus_hash": self.corpus.content_hash(),
            "generator": self.config.generator_id(),
            "temperature": self.config.temperature,
            "max_output_tokens": self.config.max_output_tokens,
            "seed": self.config.seed,
        });
        let meta_text = serde_json::to_string_pretty(&meta).expect("serializable") + "\n";
        write_atomic(&dir.join("meta.json"), meta_text.as_bytes())?;
        Ok(save_expansions(path, &self.corpus, records)?)
    }

    /// Records for copies `1..=m`, checking every document has all of them.
    fn complete_expansions(&self) -> Result<Vec<ExpansionRecord>> {
        let m = self.config.m;
        let path = self.expansion_path();
        if m == 0 || !path.exists() {
            return Err(PipelineError::EmptyExpansion { m });
        }
        let records: Vec<ExpansionRecord> = load_expansions(&path)?
            .into_iter()
            .filter(|r| r.copy_index >= 1 && r.copy_index <= m)
            .collect();
        if records.is_empty() {
            return Err(PipelineError::EmptyExpansion { m });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *counts.entry(r.doc_id.as_str()).or_default() += 1;
        }
        for doc in &self.corpus.documents {
            let have = counts.get(doc.doc_id.as_str()).copied().unwrap_or(0);
            if have < m as usize {
                return Err(PipelineError::IncompleteExpansion {
                    doc_id: doc.doc_id.clone(),
                    have,
                    m,
                });
            }
        }
        Ok(records)
    }

    /// Builds the expanded multi-view index and whichever raw baseline indexes the
    /// configured methods need. Existing identical indexes are reused.
    pub fn index(&self) -> Result<Vec<BuiltIndex>> {
        let c = &self.config;
        let mut built = Vec::new();
        if c.methods.contains(&Method::Reinvoke) {
            let dir = self.reinvoke_index_dir();
            let encoder = self.encoder(c.encoder)?;
            built.push(self.build_or_reuse("reinvoke", &dir, || {
                if c.m == 0 {
                    return Ok(build_raw_index(&self.corpus, &encoder)?);
                }
                let records = self.complete_expansions()?;
                let copies = expanded_corpus(&self.corpus, &records, c.m, c.expansion_mode);
                Ok(build_index(&self.corpus, &copies, &encoder, c.aggregation)?)
            })?);
        }
        for kind in [EncoderKind::Bm25, EncoderKind::Dense] {
            if c.needs_raw(kind) {
                let dir = self.raw_index_dir(kind);
                let encoder = self.encoder(kind)?;
                built.push(self.build_or_reuse(&format!("raw-{kind}"), &dir, || {
                    Ok(build_raw_index(&self.corpus, &encoder)?)
                })?);
            }
        }
        Ok(built)
    }

    fn build_or_reuse(
        &self,
        label: &str,
        dir: &Path,
        build: impl FnOnce() -> Result<ToolIndex>,
    ) -> Result<BuiltIndex> {
        if dir.join("manifest.json").exists() {
            match ToolIndex::load(dir) {
                Ok(index) => {
                    return Ok(BuiltIndex {
                        label: label.to_string(),
                        dir: dir.to_path_buf(),
                        manifest: index.manifest,
                        rebuilt: false,
                    })
                }
                Err(e) => log::warn!("rebuilding {}: {e}", dir.display()),
            }
        }
        let index = build()?;
        let mut tmp = dir.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        index.save(&tmp)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
        let manifest = ToolIndex::load(dir)?.manifest;
        Ok(BuiltIndex {
            label: label.to_string(),
            dir: dir.to_path_buf(),
            manifest,
            rebuilt: true,
        })
    }

    fn load_index(&self, dir: &Path, kind: EncoderKind) -> Result<EncodedIndex> {
        if !dir.join("manifest.json").exists() {
            return Err(PipelineError::MissingIndex(dir.display().to_string()));
        }
        Ok(EncodedIndex::new(ToolIndex::load(dir)?, self.encoder(kind)?)?)
    }

    /// A retriever over the indexes written by [`Pipeline::index`].
    pub fn retriever(&self) -> Result<Retriever> {
        let c = &self.config;
        let reinvoke = if c.methods.contains(&Method::Reinvoke) {
            Some(self.load_index(&self.reinvoke_index_dir(), c.encoder)?)
        } else {
            None
        };
        let raw = |kind| -> Result<Option<EncodedIndex>> {
            if c.needs_raw(kind) {
                Ok(Some(self.load_index(&self.raw_index_dir(kind), kind)?))
            } else {
                Ok(None)
            }
        };
        Ok(Retriever {
            reinvoke,
            raw_bm25: raw(EncoderKind::Bm25)?,
            raw_dense: raw(EncoderKind::Dense)?,
            intents: if c.intents {
                IntentSource::Llm {
                    client: self.client(),
                    params: c.intent_params(),
                }
            } else {
                IntentSource::Disabled
            },
            hyde_client: c.methods.contains(&Method::Hyde).then(|| self.client()),
            hyde_encoder: c.encoder,
        })
    }

    /// Intents, per-intent scores and ranking for one query.
    pub fn explain(&self, query: &str, k: usize) -> Result<Explanation> {
        Ok(self.retriever()?.explain("query", query, k)?)
    }

    /// One result per configured method for an ad-hoc query.
    pub fn retrieve_query(&self, query: &str, k: usize) -> Result<Vec<RetrievalResult>> {
        let retriever = self.retriever()?;
        self.config
            .methods
            .iter()
            .map(|m| Ok(retriever.retrieve("query", query, k, *m)?))
            .collect()
    }

    fn dataset(&self) -> Result<(Vec<EvalExample>, Vec<ExcludedQuery>)> {
        let path = self.dataset_path()?;
        let (examples, excluded) = load_eval_dataset_lenient(&path, &self.corpus)?;
        if !excluded.is_empty() {
            log::warn!(
                "{} queries excluded: none of their relevant tools are in the corpus",
                excluded.len()
            );
        }
        Ok((examples, excluded))
    }

    /// Runs every configured method over the dataset and writes one run
    /// file per method.
    pub fn retrieve_dataset(&self) -> Result<RetrieveSummary> {
        let c = &self.config;
        let (examples, excluded) = self.dataset()?;
        let retriever = self.retriever()?;
        let per_query = parallel_map(&examples, c.jobs, |ex| {
            let mut results = Vec::with_capacity(c.methods.len());
            let mut intents = Vec::new();
            for &method in &c.methods {
                if method == Method::Reinvoke {
                    let exp = retriever.explain(&ex.query_id, &ex.query_text, c.k)?;
                    intents = exp.intents;
                    results.push(exp.result);
                } else {
                    results.push(retriever.retrieve(&ex.query_id, &ex.query_text, c.k, method)?);
                }
            }
            Ok((results, intents))
        })?;

        let run_dir = self.run_dir()?;
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let mut files = Vec::new();
        for (mi, &method) in c.methods.iter().enumerate() {
            let results: Vec<RetrievalResult> = per_query.iter().map(|(r, _)| r[mi].clone()).collect();
            let path = run_dir.join(format!("{method}.run"));
            write_run(&path, &results)?;
            files.push((method, path));
        }
        if c.methods.contains(&Method::Reinvoke) {
            let intents: Vec<Intent> = per_query.iter().flat_map(|(_, i)| i.iter().cloned()).collect();
            save_intents(&run_dir.join("intents.jsonl"), &intents)?;
        }
        Ok(RetrieveSummary {
            run_dir,
            files,
            queries: examples.len(),
            excluded,
        })
    }

    /// Default run files: one per configured method in [`Pipeline::run_dir`].
    pub fn default_run_files(&self) -> Result<Vec<PathBuf>> {
        let dir = self.run_dir()?;
        Ok(self
            .config
            .methods
            .iter()
            .map(|m| dir.join(format!("{m}.run")))
            .collect())
    }

    /// Scores run files against the dataset and writes `report.json` and
    /// `report.txt`.
    pub fn evaluate(&self, run_files: &[PathBuf]) -> Result<EvaluateOutcome> {
        let run_files = if run_files.is_empty() {
            self.default_run_files()?
        } else {
            run_files.to_vec()
        };
        let (examples, excluded) = self.dataset()?;
        let known: HashSet<&str> = examples.iter().map(|e| e.query_id.as_str()).collect();
        let mut evaluations = Vec::new();
        let mut ignored = 0;
        let mut fingerprint = Vec::new();
        for path in &run_files {
            if !path.exists() {
                return Err(PipelineError::MissingRun(path.display().to_string()));
            }
            let run = read_run(path)?;
            fingerprint.push(sha256_hex(&fs::read(path).map_err(io_err(path))?));
            let (lists, dropped): (Vec<RankedList>, Vec<RankedList>) = run
                .lists
                .into_iter()
                .partition(|l| known.contains(l.query_id.as_str()));
            for l in &dropped {
                if !excluded.iter().any(|e| e.query_id == l.query_id) {
                    log::warn!("{}: query `{}` is not in the dataset; ignored", path.display(), l.query_id);
                }
            }
            ignored += dropped.len();
            let method = if run.method.is_empty() {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            } else {
                run.method
            };
            let mut eval = crate::eval::evaluate_run(&method, &lists, &examples, &self.config.ks)?;
            eval.excluded_queries = excluded.len();
            evaluations.push(eval);
        }
        evaluations.sort_by(|a, b| {
            let key = |e: &MethodEvaluation| e.value(Metric::Ndcg, 5).unwrap_or(f64::NEG_INFINITY);
            key(b).total_cmp(&key(a)).then_with(|| a.method.cmp(&b.method))
        });
        let report = EvaluationReport {
            query_count: examples.len(),
            excluded_queries: excluded,
            ignored_run_queries: ignored,
            averaging: "macro (mean of per-query values)".into(),
            methods: evaluations,
        };
        let mut text = String::new();
        writeln!(
            text,
            "queries: {} (excluded: {}, averaging: {})",
            report.query_count,
            report.excluded_queries.len(),
            report.averaging
        )
        .expect("write to string");
        text.push_str(&format_table(&report.methods));

        let dataset = self.dataset_path()?;
        let key = short_hash(&json!({
            "runs": fingerprint,
            "dataset": sha256_hex(&fs::read(&dataset).map_err(io_err(&dataset))?),
            "corpus": self.corpus.content_hash(),
            "ks": self.config.ks,
        }));
        let dir = self.config.work_dir.join("reports").join(format!("eval-{key}"));
        let json_path = dir.join("report.json");
        let text_path = dir.join("report.txt");
        let json_text = serde_json::to_string_pretty(&report).expect("serializable report") + "\n";
        write_atomic(&json_path, json_text.as_bytes())?;
        write_atomic(&text_path, text.as_bytes())?;
        Ok(EvaluateOutcome {
            report,
            text,
            json_path,
            text_path,
        })
    }

    /// Round-trip recall@k of the synthetic queries against the expanded
    /// index, for every configured cut-off.
    pub fn roundtrip(&self) -> Result<RoundtripOutcome> {
        let c = &self.config;
        let records = self.complete_expansions()?;
        let params = c.generation_params();
        let synthetic: Vec<_> = records.iter().map(|r| r.to_query(&params)).collect();
        let ei = self.load_index(&self.reinvoke_index_dir(), c.encoder)?;
        let reports = roundtrip_reports(&synthetic, &ei.index, &ei.encoder, &c.ks)?;

        let eval = MethodEvaluation {
            method: Method::Reinvoke.to_string(),
            query_count: synthetic.len(),
            missing_queries: 0,
            excluded_queries: 0,
            averaging: "mean over synthetic queries".into(),
            reports: reports.clone(),
        };
        let text = format!(
            "synthetic queries: {} (m = {}, encoder = {}, aggregation = {})\n{}",
            synthetic.len(),
            c.m,
            c.encoder,
            c.aggregation,
            format_table(std::slice::from_ref(&eval))
        );
        let dir_name = self
            .reinvoke_index_dir()
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let ks: Vec<String> = c.ks.iter().map(ToString::to_string).collect();
        let dir = c
            .work_dir
            .join("reports")
            .join(format!("roundtrip-{dir_name}-k{}", ks.join("-")));
        let json_path = dir.join("report.json");
        let text_path = dir.join("report.txt");
        let json_text = serde_json::to_string_pretty(&eval).expect("serializable report") + "\n";
        write_atomic(&json_path, json_text.as_bytes())?;
        write_atomic(&text_path, text.as_bytes())?;
        Ok(RoundtripOutcome {
            reports,
            text,
            json_path,
            text_path,
        })
    }
}

/// Per-intent rows (top `rows` documents of each intent, best first) and
/// the final ranking with its keys.
pub fn format_explanation(exp: &Explanation, rows: usize) -> String {
    let mut out = String::new();
    let w = exp
        .scores
        .doc_ids
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(3);
    for (intent, row) in exp.intents.iter().zip(&exp.scores.rows) {
        writeln!(out, "intent {}: {}", intent.intent_index, intent.text).expect("write to string");
        writeln!(out, "  {:<w$}  {:>12}  {:>13}", "doc", "similarity", "reversed_rank").expect("write");
        let mut sorted: Vec<_> = row.iter().collect();
        sorted.sort_by_key(|s| std::cmp::Reverse(s.reversed_rank));
        for s in sorted.into_iter().take(rows) {
            writeln!(out, "  {:<w$}  {:>12.6}  {:>13}", s.doc_id, s.sim, s.reversed_rank).expect("write");
        }
    }
    writeln!(out, "ranking:").expect("write to string");
    for (pos, RankedDoc { doc_id, key }) in exp.result.ranked.iter().enumerate() {
        writeln!(
            out,
            "  {:>3}. {:<w$}  ({}, {:.6})",
            pos + 1,
            doc_id,
            key.reversed_rank,
            key.sim
        )
        .expect("write to string");
    }
    out
}

/// Per-method rankings for an ad-hoc query, as text.
pub fn format_results(results: &[RetrievalResult]) -> String {
    let mut out = String::new();
    for r in results {
        writeln!(out, "{}:", r.method).expect("write to string");
        for (pos, d) in r.ranked.iter().enumerate() {
            writeln!(out, "  {:>3}. {}  {:.6}", pos + 1, d.doc_id, d.key.sim).expect("write to string");
        }
    }
    out
}
