//! Per-claim knowledge bases with embedding-based k-nearest-neighbor
//! retrieval and poison injection.
//!
//! Retrieval is an exact linear scan over Euclidean distances. Knowledge
//! bases average well under a thousand entries, so the scan is the
//! production path; there is no approximate index.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::domain::Evidence;
use crate::error::{Error, Result};

/// Fixed-length vector of finite f64s.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn euclidean_distance(&self, other: &EmbeddingVector) -> f64 {
        self.squared_distance(other).sqrt()
    }

    pub fn squared_distance(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }
}

/// Text-to-vector encoder. Implementations must be deterministic and safe
/// for concurrent calls.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// 64-bit FNV-1a. Stable across runs and platforms; also reused for content
/// fingerprints elsewhere in the workspace.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Lowercased alphanumeric token runs; everything else is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Deterministic test embedder: each token is hashed into one of `dim`
/// buckets with a hash-derived weight in [1, 2), accumulated over the token
/// bag, then L2-normalized. Same token multiset, same vector; the weight term
/// makes distinct tokens colliding into one bucket produce distinct values.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedder dim must be positive");
        HashEmbedder { dim, seed, name: format!("hash-d{dim}-s{seed}") }
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyText("embedding input"));
        }
        let mut values = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            let h = fnv1a64(self.seed, token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let weight = 1.0 + (h >> 40) as f64 / (1u64 << 24) as f64;
            values[bucket] += weight;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector::new(values)
    }
}

/// Embedder backed by an OpenAI-compatible embeddings endpoint. The vector
/// dimension is probed with one request at construction time.
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    dim: usize,
    name: String,
}

#[derive(serde::Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

#[derive(serde::Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

impl RemoteEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self> {
        let base_url = base_url.into();
        let model = model.into();
        if base_url.is_empty() || model.is_empty() {
            return Err(Error::InvalidConfig("live embedder needs base_url and model".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let name = format!("live-{model}");
        let mut embedder = RemoteEmbedder { base_url, model, api_key, client, dim: 0, name };
        let probe = embedder.request(&["dimension probe"])?;
        embedder.dim = probe[0].dim();
        Ok(embedder)
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let payload = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = self
            .client
            .post(format!("{}/v1/embeddings", self.base_url.trim_end_matches('/')))
            .json(&payload);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(Error::RateLimited);
        }
        if status.is_server_error() {
            return Err(Error::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Error::Rejected { status: status.as_u16(), body });
        }
        let parsed: EmbeddingResponse =
            serde_json::from_str(&body).map_err(|e| Error::MalformedReply(format!("{e}: {body}")))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::MalformedReply(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.into_iter().map(|item| EmbeddingVector::new(item.embedding)).collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyText("embedding input"));
        }
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::EmptyText("embedding input"));
        }
        self.request(texts)
    }
}

/// One knowledge-base entry: an evidence and its embedding.
#[derive(Debug, Clone)]
pub struct KbEntry {
    pub evidence: Evidence,
    pub embedding: EmbeddingVector,
}

/// An evidence returned by retrieval, with its distance to the query.
#[derive(Debug, Clone)]
pub struct RetrievalHit<'a> {
    pub entry: &'a KbEntry,
    pub distance: f64,
}

/// Per-claim evidence corpus. Immutable after construction; concurrent
/// retrieves are safe, and injection produces a new value.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    claim_id: String,
    entries: Vec<KbEntry>,
    dim: usize,
}

impl KnowledgeBase {
    /// Build from pre-embedded entries. All embeddings must share one dim and
    /// evidence ids must be unique.
    pub fn new(claim_id: impl Into<String>, entries: Vec<(Evidence, EmbeddingVector)>) -> Result<Self> {
        let dim = entries.first().map(|(_, v)| v.dim()).unwrap_or(0);
        let mut seen = HashSet::new();
        let mut kb_entries = Vec::with_capacity(entries.len());
        for (evidence, embedding) in entries {
            if embedding.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, got: embedding.dim() });
            }
            if !seen.insert(evidence.id.clone()) {
                return Err(Error::DuplicateEvidenceId(evidence.id));
            }
            kb_entries.push(KbEntry { evidence, embedding });
        }
        Ok(KnowledgeBase { claim_id: claim_id.into(), entries: kb_entries, dim })
    }

    /// Build by embedding each evidence text.
    pub fn from_evidences(
        claim_id: impl Into<String>,
        evidences: Vec<Evidence>,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(evidences.len());
        for evidence in evidences {
            let embedding = embedder.embed(&evidence.text)?;
            entries.push((evidence, embedding));
        }
        let mut kb = Self::new(claim_id, entries)?;
        if kb.entries.is_empty() {
            kb.dim = embedder.dim();
        }
        Ok(kb)
    }

    pub fn claim_id(&self) -> &str {
        &self.claim_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&KbEntry> {
        self.entries.iter().find(|e| e.evidence.id == id)
    }

    pub fn clean_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.evidence.is_malicious()).count()
    }

    pub fn malicious_count(&self) -> usize {
        self.entries.iter().filter(|e| e.evidence.is_malicious()).count()
    }

    /// The `min(k, len)` entries nearest to `query` under Euclidean distance,
    /// ascending; exact ties break by lexicographic evidence id.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit<'_>>> {
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: query.dim() });
        }
        let mut scored: Vec<(f64, &KbEntry)> = self
            .entries
            .iter()
            .map(|e| (e.embedding.squared_distance(query), e))
            .collect();
        scored.sort_by(|(da, ea), (db, eb)| {
            da.total_cmp(db).then_with(|| ea.evidence.id.cmp(&eb.evidence.id))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(d2, entry)| RetrievalHit { entry, distance: d2.sqrt() })
            .collect())
    }

    /// New knowledge base with `poison` appended (embeddings computed here).
    /// The receiver is left untouched; clean entries carry over bit-exactly.
    pub fn inject(&self, poison: &[Evidence], embedder: &dyn Embedder) -> Result<KnowledgeBase> {
        let existing: HashSet<&str> = self.entries.iter().map(|e| e.evidence.id.as_str()).collect();
        let mut added = HashSet::new();
        let mut entries = self.entries.clone();
        for evidence in poison {
            if !evidence.is_malicious() {
                return Err(Error::PoisonNotMalicious(evidence.id.clone()));
            }
            if existing.contains(evidence.id.as_str()) || !added.insert(evidence.id.clone()) {
                return Err(Error::PoisonIdCollision(evidence.id.clone()));
            }
            let embedding = embedder.embed(&evidence.text)?;
            let dim = if entries.is_empty() { embedding.dim() } else { self.dim.max(1) };
            if !entries.is_empty() && embedding.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, got: embedding.dim() });
            }
            entries.push(KbEntry { evidence: evidence.clone(), embedding });
        }
        let dim = entries.first().map(|e| e.embedding.dim()).unwrap_or(embedder.dim());
        Ok(KnowledgeBase { claim_id: self.claim_id.clone(), entries, dim })
    }
}

/// On-disk line format: canonical evidence JSON plus an optional cached
/// embedding (base64 of the little-endian f32 array).
#[derive(Serialize, Deserialize)]
struct StoredEvidence {
    #[serde(flatten)]
    evidence: Evidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<String>,
}

fn encode_embedding(v: &EmbeddingVector) -> String {
    let mut bytes = Vec::with_capacity(v.dim() * 4);
    for &x in v.as_slice() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_embedding(s: &str) -> Result<EmbeddingVector> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::MalformedReply(format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedReply("embedding byte length not a multiple of 4".into()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingVector::new(values)
}

/// Write a knowledge base as line-delimited JSON with cached embeddings.
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for entry in kb.entries() {
        let line = StoredEvidence {
            evidence: entry.evidence.clone(),
            embedding: Some(encode_embedding(&entry.embedding)),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::MalformedReply(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("flush {}", path.display()), e))
}

/// Load a knowledge base; lines without a cached embedding are embedded with
/// `embedder`.
pub fn load_kb(path: &Path, claim_id: &str, embedder: &dyn Embedder) -> Result<KnowledgeBase> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let stored: StoredEvidence = serde_json::from_str(&line).map_err(|e| Error::DatasetSchema {
            file: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        let embedding = match stored.embedding {
            Some(ref enc) => decode_embedding(enc)?,
            None => embedder.embed(&stored.evidence.text)?,
        };
        entries.push((stored.evidence, embedding));
    }
    let mut kb = KnowledgeBase::new(claim_id, entries)?;
    if kb.is_empty() {
        kb.dim = embedder.dim();
    }
    Ok(kb)
}
