//! Knowledge-base embedding and exact cosine top-k retrieval.
//!
//! The default [`HashedNgramEmbedder`] is offline and deterministic; an
//! OpenAI-style `/embeddings` endpoint can be plugged in through
//! [`HttpEmbeddingProvider`].
//!
//! On disk a knowledge base is a directory holding `manifest.json` and
//! `vectors.bin`. The vector file is the 8-byte magic `PFVEC1\0\0`, then the
//! row count and dimension as little-endian `u64`, then `rows * dim`
//! little-endian `f64` values in row-major order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_K: usize = 4;
pub const CHUNK_CHARS: usize = 1200;
pub const CHUNK_OVERLAP: usize = 200;
const MAGIC: &[u8; 8] = b"PFVEC1\0\0";

pub trait EmbeddingProvider: Send + Sync {
    /// Identifier recorded in the index; it changes whenever vectors would.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Character n-grams hashed into `dim` buckets with FNV-1a, log-scaled
/// counts, unit L2 norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub min_n: usize,
    pub max_n: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            min_n: 3,
            max_n: 5,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn id(&self) -> String {
        format!("hashed-ngram-v1/d{}/n{}-{}", self.dim, self.min_n, self.max_n)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if norm.is_empty() {
            return Err(Error::Argument("cannot embed empty text".into()));
        }
        let chars: Vec<char> = format!(" {norm} ").chars().collect();
        let mut v = vec![0.0f64; self.dim];
        let mut buf = String::new();
        for n in self.min_n..=self.max_n {
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                v[(fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
            }
        }
        for x in &mut v {
            *x = x.ln_1p();
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len == 0.0 {
            return Err(Error::Argument(format!(
                "text `{norm}` is shorter than the smallest n-gram"
            )));
        }
        Ok(v.into_iter().map(|x| x / len).collect())
    }
}

/// Remote embeddings over an OpenAI-compatible `POST {base}/embeddings`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("http/{}/d{}", self.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot embed empty text".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "input": text }).to_string();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            let mut req = agent.post(&url).header("Content-Type", "application/json");
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = match req.send(&body) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            if status != 200 {
                last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                continue;
            }
            let parsed: serde_json::Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(e) => {
                    last = format!("malformed body: {e}");
                    continue;
                }
            };
            let Some(arr) = parsed["data"][0]["embedding"].as_array() else {
                last = "response has no data[0].embedding".into();
                continue;
            };
            let v: Vec<f64> = arr.iter().filter_map(serde_json::Value::as_f64).collect();
            if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!(
                    "embedding has {} finite values, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            return Ok(v);
        }
        Err(Error::Transport {
            attempts: self.max_retries + 1,
            message: last,
        })
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity("zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    /// Source file, relative to the knowledge-base directory.
    pub source: String,
    /// Character offset of the chunk within its source.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// A scored document with its text, ready for a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub score: f64,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    provider_id: String,
    dim: usize,
    docs: Vec<KbDoc>,
    vectors: Vec<f64>,
}

impl KnowledgeBase {
    pub fn new(provider_id: impl Into<String>, dim: usize) -> Self {
        Self {
            provider_id: provider_id.into(),
            dim,
            docs: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, doc: KbDoc, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Argument(format!(
                "vector for `{}` has dimension {}, index uses {}",
                doc.doc_id,
                vector.len(),
                self.dim
            )));
        }
        if self.docs.iter().any(|d| d.doc_id == doc.doc_id) {
            return Err(Error::Argument(format!("duplicate doc_id `{}`", doc.doc_id)));
        }
        self.docs.push(doc);
        self.vectors.extend(vector);
        Ok(())
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn docs(&self) -> &[KbDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn top_k(&self, provider: &dyn EmbeddingProvider, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        if provider.id() != self.provider_id {
            return Err(Error::Schema(format!(
                "index was built with `{}`, query provider is `{}`",
                self.provider_id,
                provider.id()
            )));
        }
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.is_empty() {
            log::warn!("knowledge base is empty; continuing without retrieved context");
            return Ok(Vec::new());
        }
        let q = provider.embed(query)?;
        self.top_k_vector(&q, k)
    }

    /// Exact scan: every document is scored, then sorted by descending score
    /// with ties broken by ascending doc_id.
    pub fn top_k_vector(&self, query: &[f64], k: usize) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let mut scored = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Ok(ScoredDoc {
                    doc_id: d.doc_id.clone(),
                    score: cosine(query, self.vector(i))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn resolve(&self, hits: &[ScoredDoc]) -> Vec<RetrievedDoc> {
        hits.iter()
            .filter_map(|h| {
                self.docs.iter().find(|d| d.doc_id == h.doc_id).map(|d| RetrievedDoc {
                    doc_id: d.doc_id.clone(),
                    score: h.score,
                    title: d.title.clone(),
                    body: d.body.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: "paincast-kb".into(),
            version: 1,
            provider_id: self.provider_id.clone(),
            dim: self.dim,
            vector_file: "vectors.bin".into(),
            docs: self.docs.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::with_capacity(24 + self.vectors.len() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.docs.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join("vectors.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != "paincast-kb" || m.version != 1 {
            return Err(Error::Schema(format!("unsupported index {} v{}", m.format, m.version)));
        }
        let path = dir.join(&m.vector_file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::Schema(format!("{} is not a vector file", path.display())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let (rows, dim) = (word(8) as usize, word(16) as usize);
        if rows != m.docs.len() || dim != m.dim || bytes.len() != 24 + rows * dim * 8 {
            return Err(Error::Schema(format!(
                "vector file holds {rows}x{dim} ({} bytes); manifest lists {} docs of dimension {}",
                bytes.len(),
                m.docs.len(),
                m.dim
            )));
        }
        let vectors = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            provider_id: m.provider_id,
            dim,
            docs: m.docs,
            vectors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    provider_id: String,
    dim: usize,
    vector_file: String,
    docs: Vec<KbDoc>,
}

/// Overlapping character windows as `(char offset, text)`.
pub fn chunk_text(text: &str, chunk_chars: usize, overlap: usize) -> Result<Vec<(usize, String)>> {
    if chunk_chars == 0 || overlap >= chunk_chars {
        return Err(Error::Argument(format!(
            "need 0 <= overlap ({overlap}) < chunk size ({chunk_chars})"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_chars).min(chars.len());
        out.push((start, chars[start..end].iter().collect()));
        if end == chars.len() {
            break;
        }
        start += chunk_chars - overlap;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbIngestReport {
    pub skipped: Vec<(PathBuf, String)>,
}

/// Embeds every `.txt` / `.md` file under `dir`, in path order.
pub fn ingest_kb(
    dir: &Path,
    provider: &dyn EmbeddingProvider,
    chunk_chars: usize,
    overlap: usize,
) -> Result<(KnowledgeBase, KbIngestReport)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "knowledge-base directory not found"),
        ));
    }
    let mut kb = KnowledgeBase::new(provider.id(), provider.dim());
    let mut report = KbIngestReport::default();
    let mut seen_ids = BTreeSet::new();
    let files = walkdir::WalkDir::new(dir).sort_by_file_name().into_iter();
    for entry in files {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let p = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
                report.skipped.push((p, e.to_string()));
                continue;
            }
        };
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !entry.file_type().is_file() || !matches!(ext, "txt" | "md") {
            continue;
        }
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path.to_path_buf(), e.to_string()));
                continue;
            }
        };
        if text.trim().is_empty() {
            report.skipped.push((path.to_path_buf(), "empty file".into()));
            continue;
        }
        let rel = path.strip_prefix(dir).unwrap_or(path);
        let source = rel.to_string_lossy().replace('\\', "/");
        let stem = rel.with_extension("").to_string_lossy().replace('\\', "/");
        let title = text
            .lines()
            .map(|l| l.trim().trim_start_matches('#').trim())
            .find(|l| !l.is_empty())
            .unwrap_or(&stem)
            .to_string();
        for (i, (offset, body)) in chunk_text(&text, chunk_chars, overlap)?.into_iter().enumerate() {
            if body.trim().is_empty() {
                continue;
            }
            let doc_id = format!("{stem}#{i:04}");
            if !seen_ids.insert(doc_id.clone()) {
                report.skipped.push((path.to_path_buf(), format!("duplicate doc id {doc_id}")));
                continue;
            }
            let v = provider.embed(&body)?;
            kb.push(
                KbDoc {
                    doc_id,
                    title: title.clone(),
                    body,
                    source: source.clone(),
                    offset,
                },
                v,
            )?;
        }
    }
    if kb.is_empty() {
        log::warn!("knowledge base at {} is empty", dir.display());
    }
    Ok((kb, report))
}
