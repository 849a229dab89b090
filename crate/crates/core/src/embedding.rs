//! Frozen text encoders and the embedding cache.
//!
//! Two backend families sit behind [`EncoderHandle`]:
//!
//! * [`StubEncoder`]: an offline, deterministic hashed bag-of-n-grams encoder.
//!   Every unigram, bigram, and the full text hash to their own seeded
//!   Gaussian direction; the sum is normalized to unit length. Texts that
//!   share phrases therefore share embedding components, the way pretrained
//!   encoders do, and no download is needed.
//! * [`CommandEncoder`]: delegates to an external process (for example a
//!   Python script wrapping a pretrained clinical BERT or a medical CLIP text
//!   tower). Requests and responses are single JSON documents on stdin/stdout.
//!
//! Embeddings are memoized in memory and optionally on disk, one file per
//! `(encoder_id, text)` pair.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tabular::TextDescription;

const CACHE_MAGIC: &[u8; 4] = b"CSEM";
const CACHE_VERSION: u16 = 1;
const CACHE_HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("encoder backend unavailable: {0}")]
    Unavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("encoder backend failed: {0}")]
    Backend(String),
    #[error("encoder returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("encoder returned non-finite values")]
    NonFinite,
    #[error("text {index}: {source}")]
    Row {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    PretrainedClinicalLm,
    PretrainedContrastiveVlm,
    DeterministicStub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// The encoder's designated summary token (`[CLS]` / end-of-text).
    SummaryToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub encoder_id: String,
    pub dimension: usize,
    pub backend: BackendKind,
    pub cache_dir: Option<PathBuf>,
    pub max_tokens: usize,
    pub pooling: Pooling,
    /// Program and arguments for pretrained backends.
    pub command: Vec<String>,
    /// Seed of the stub's hash-to-Gaussian map.
    pub stub_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            encoder_id: "stub-768".into(),
            dimension: 768,
            backend: BackendKind::DeterministicStub,
            cache_dir: None,
            max_tokens: 512,
            pooling: Pooling::SummaryToken,
            command: Vec::new(),
            stub_seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub source_text_hash: String,
    pub encoder_id: String,
    /// The input exceeded the encoder's token limit and was truncated.
    #[serde(default)]
    pub truncated: bool,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| v as f64).collect()
    }
}

/// Raw output of a backend for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub vector: Vec<f32>,
    pub truncated: bool,
}

/// A frozen text encoder. Implementations must be deterministic.
pub trait TextEncoder: Send + Sync {
    fn dimension(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Encoded, EmbedError>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Encoded>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.encode(t).map_err(|e| EmbedError::Row {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Digest of everything that determines the encoder's outputs.
    fn parameter_checksum(&self) -> String;
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic hashed bag-of-n-grams encoder.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dimension: usize,
    max_tokens: usize,
    seed: u64,
}

impl StubEncoder {
    pub fn new(dimension: usize, max_tokens: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            max_tokens: max_tokens.max(1),
            seed,
        }
    }

    fn direction(&self, feature: &str, out: &mut [f64], weight: f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(feature.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += weight * z;
        }
    }
}

impl TextEncoder for StubEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, text: &str) -> Result<Encoded, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut tokens = tokenize(text);
        let truncated = tokens.len() > self.max_tokens;
        tokens.truncate(self.max_tokens);
        let mut acc = vec![0.0; self.dimension];
        for t in &tokens {
            self.direction(&format!("1:{t}"), &mut acc, 1.0);
        }
        for w in tokens.windows(2) {
            self.direction(&format!("2:{} {}", w[0], w[1]), &mut acc, 1.0);
        }
        // exact-text component keeps distinct strings apart even when their
        // token streams coincide
        let kept = if truncated { tokens.join(" ") } else { text.to_string() };
        self.direction(&format!("t:{kept}"), &mut acc, 0.25);
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let vector = acc.iter().map(|v| (v / norm) as f32).collect();
        Ok(Encoded { vector, truncated })
    }

    fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"stub");
        h.update((self.dimension as u64).to_le_bytes());
        h.update((self.max_tokens as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Serialize)]
struct CommandRequest<'a> {
    texts: &'a [&'a str],
    pooling: Pooling,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CommandResponse {
    embeddings: Vec<Vec<f32>>,
    #[serde(default)]
    truncated: Vec<bool>,
    #[serde(default)]
    checksum: Option<String>,
}

/// Pretrained encoder served by an external program.
#[derive(Debug, Clone)]
pub struct CommandEncoder {
    program: String,
    args: Vec<String>,
    dimension: usize,
    max_tokens: usize,
    pooling: Pooling,
    checksum: String,
}

impl CommandEncoder {
    /// Launch the program once with an empty request to confirm it responds;
    /// it may report a weight checksum used for the frozenness check.
    pub fn open(
        command: &[String],
        dimension: usize,
        max_tokens: usize,
        pooling: Pooling,
    ) -> Result<Self, EmbedError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EmbedError::Unavailable("no encoder command configured".into()))?;
        let mut enc = Self {
            program: program.clone(),
            args: args.to_vec(),
            dimension,
            max_tokens,
            pooling,
            checksum: String::new(),
        };
        let probe = enc.call(&[])?;
        enc.checksum = probe
            .checksum
            .unwrap_or_else(|| text_hash(&command.join("\u{1f}")));
        Ok(enc)
    }

    fn call(&self, texts: &[&str]) -> Result<CommandResponse, EmbedError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EmbedError::Unavailable(format!("{}: {e}", self.program)))?;
        let req = serde_json::to_vec(&CommandRequest {
            texts,
            pooling: self.pooling,
            max_tokens: self.max_tokens,
        })
        .expect("request serializes");
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&req)
            .map_err(|e| EmbedError::Unavailable(format!("{}: {e}", self.program)))?;
        let out = child
            .wait_with_output()
            .map_err(|e| EmbedError::Backend(e.to_string()))?;
        if !out.status.success() {
            return Err(EmbedError::Unavailable(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout)
            .map_err(|e| EmbedError::Backend(format!("malformed response: {e}")))
    }
}

impl TextEncoder for CommandEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, text: &str) -> Result<Encoded, EmbedError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Encoded>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::Row {
                index,
                source: Box::new(EmbedError::EmptyText),
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self.call(texts)?;
        if resp.embeddings.len() != texts.len() {
            return Err(EmbedError::Backend(format!(
                "{} embeddings for {} texts",
                resp.embeddings.len(),
                texts.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .enumerate()
            .map(|(i, vector)| {
                if vector.len() != self.dimension {
                    return Err(EmbedError::Dimension {
                        expected: self.dimension,
                        got: vector.len(),
                    });
                }
                Ok(Encoded {
                    vector,
                    truncated: resp.truncated.get(i).copied().unwrap_or(false),
                })
            })
            .collect()
    }

    fn parameter_checksum(&self) -> String {
        self.checksum.clone()
    }
}

/// One-file-per-embedding store with atomic writes.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(encoder_id: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(encoder_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.emb"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self, key: &str, dimension: usize) -> Option<Encoded> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        match decode_cache_file(&bytes, dimension) {
            Some(e) => Some(e),
            None => {
                log::warn!("ignoring corrupt embedding cache entry {key}");
                None
            }
        }
    }

    pub fn store(&self, key: &str, enc: &Encoded) -> Result<(), EmbedError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&encode_cache_file(enc))?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path(key)).map_err(|e| e.error)?;
        Ok(())
    }
}

/// 16-byte header (`CSEM`, version u16, flags u16, dimension u32, reserved u32)
/// followed by little-endian f32 values.
pub fn encode_cache_file(enc: &Encoded) -> Vec<u8> {
    let mut out = Vec::with_capacity(CACHE_HEADER + 4 * enc.vector.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(enc.truncated as u16).to_le_bytes());
    out.extend_from_slice(&(enc.vector.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &enc.vector {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cache_file(bytes: &[u8], dimension: usize) -> Option<Encoded> {
    if bytes.len() < CACHE_HEADER || &bytes[..4] != CACHE_MAGIC {
        return None;
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if u16_at(4) != CACHE_VERSION {
        return None;
    }
    let dim = u32_at(8) as usize;
    if dim != dimension || bytes.len() != CACHE_HEADER + 4 * dim {
        return None;
    }
    let vector: Vec<f32> = bytes[CACHE_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    vector.iter().all(|v| v.is_finite()).then_some(Encoded {
        vector,
        truncated: u16_at(6) & 1 == 1,
    })
}

/// A loaded encoder plus its caches and call counters.
pub struct EncoderHandle {
    config: EncoderConfig,
    backend: Box<dyn TextEncoder>,
    disk: Option<DiskCache>,
    memo: Mutex<HashMap<String, Encoded>>,
    encoder_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl std::fmt::Debug for EncoderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderHandle")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl EncoderHandle {
    pub fn open(config: EncoderConfig) -> Result<Self, EmbedError> {
        let backend: Box<dyn TextEncoder> = match config.backend {
            BackendKind::DeterministicStub => Box::new(StubEncoder::new(
                config.dimension,
                config.max_tokens,
                config.stub_seed,
            )),
            BackendKind::PretrainedClinicalLm | BackendKind::PretrainedContrastiveVlm => {
                Box::new(CommandEncoder::open(
                    &config.command,
                    config.dimension,
                    config.max_tokens,
                    config.pooling,
                )?)
            }
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(
        config: EncoderConfig,
        backend: Box<dyn TextEncoder>,
    ) -> Result<Self, EmbedError> {
        if backend.dimension() != config.dimension {
            return Err(EmbedError::Dimension {
                expected: config.dimension,
                got: backend.dimension(),
            });
        }
        let disk = config.cache_dir.as_ref().map(DiskCache::new).transpose()?;
        Ok(Self {
            config,
            backend,
            disk,
            memo: Mutex::new(HashMap::new()),
            encoder_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn stub(dimension: usize) -> Self {
        Self::open(EncoderConfig {
            encoder_id: format!("stub-{dimension}"),
            dimension,
            ..EncoderConfig::default()
        })
        .expect("stub backend always loads")
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encoder_id(&self) -> &str {
        &self.config.encoder_id
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    /// Number of texts sent to the backend so far.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn parameter_checksum(&self) -> String {
        self.backend.parameter_checksum()
    }

    fn lookup(&self, key: &str) -> Option<Encoded> {
        if let Some(e) = self.memo.lock().unwrap().get(key) {
            return Some(e.clone());
        }
        let e = self.disk.as_ref()?.load(key, self.config.dimension)?;
        self.memo
            .lock()
            .unwrap()
            .insert(key.to_string(), e.clone());
        Some(e)
    }

    fn remember(&self, key: &str, enc: &Encoded) -> Result<(), EmbedError> {
        if let Some(d) = &self.disk {
            d.store(key, enc)?;
        }
        self.memo
            .lock()
            .unwrap()
            .insert(key.to_string(), enc.clone());
        Ok(())
    }

    fn finish(&self, text: &str, enc: Encoded) -> Result<TextEmbedding, EmbedError> {
        if enc.vector.len() != self.config.dimension {
            return Err(EmbedError::Dimension {
                expected: self.config.dimension,
                got: enc.vector.len(),
            });
        }
        if !enc.vector.iter().all(|v| v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        if enc.truncated {
            log::warn!(
                "text exceeded {} tokens and was truncated for {}",
                self.config.max_tokens,
                self.config.encoder_id
            );
        }
        Ok(TextEmbedding {
            vector: enc.vector,
            source_text_hash: text_hash(text),
            encoder_id: self.config.encoder_id.clone(),
            truncated: enc.truncated,
        })
    }

    pub fn embed_str(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let key = DiskCache::key(&self.config.encoder_id, text);
        if let Some(e) = self.lookup(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return self.finish(text, e);
        }
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        let enc = self.backend.encode(text)?;
        let emb = self.finish(text, enc.clone())?;
        self.remember(&key, &enc)?;
        Ok(emb)
    }

    pub fn embed(&self, text: &TextDescription) -> Result<TextEmbedding, EmbedError> {
        self.embed_str(&text.text)
    }

    /// Order-preserving batch embedding; cache misses go to the backend in
    /// one batch. Results equal per-text [`Self::embed`] calls.
    pub fn embed_batch(&self, texts: &[TextDescription]) -> Result<Vec<TextEmbedding>, EmbedError> {
        let strs: Vec<&str> = texts.iter().map(|t| t.text.as_str()).collect();
        self.embed_strs(&strs)
    }

    pub fn embed_strs(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>, EmbedError> {
        let row = |index: usize, e: EmbedError| EmbedError::Row {
            index,
            source: Box::new(e),
        };
        let mut found: Vec<Option<Encoded>> = Vec::with_capacity(texts.len());
        let mut missing = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(row(i, EmbedError::EmptyText));
            }
            let hit = self.lookup(&DiskCache::key(&self.config.encoder_id, t));
            if hit.is_some() {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
            } else if !missing.iter().any(|&j: &usize| texts[j] == *t) {
                missing.push(i);
            }
            found.push(hit);
        }
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            self.encoder_calls.fetch_add(batch.len(), Ordering::SeqCst);
            let encoded = self.backend.encode_batch(&batch).map_err(|e| match e {
                EmbedError::Row { index, source } => row(missing[index], *source),
                other => other,
            })?;
            for (&i, enc) in missing.iter().zip(encoded) {
                self.remember(&DiskCache::key(&self.config.encoder_id, texts[i]), &enc)
                    .map_err(|e| row(i, e))?;
            }
        }
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let enc = match found[i].take() {
                    Some(e) => e,
                    None => self
                        .lookup(&DiskCache::key(&self.config.encoder_id, t))
                        .expect("just stored"),
                };
                self.finish(t, enc).map_err(|e| row(i, e))
            })
            .collect()
    }
}
