//! Sentence embeddings and cosine similarity.
//!
//! Every vector that leaves this module is unit-normalized, so similarity
//! between two stored vectors is a plain dot product. Three backends sit
//! behind the [`Embedder`] trait: a deterministic feature-hashing embedder,
//! an HTTP client for an external sentence-embedding service, and a lookup
//! table loaded from disk.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{seeded_hash, tokenize};

/// Allowed deviation from unit length before a vector is re-normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Builds a unit vector from raw components.
    ///
    /// Vectors already within [`UNIT_NORM_TOLERANCE`] of unit length are
    /// kept bit-for-bit; anything else is divided by its norm.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDim(0));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite component".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput("embedding has zero norm".into()));
        }
        if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
            return Ok(Self { values });
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Similarity of two unit vectors: their dot product, summed in index
    /// order and clamped to [-1, 1].
    pub fn unit_similarity(&self, other: &Self) -> Result<f64> {
        check_dims(self, other)?;
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        // adding 0.0 turns -0.0 into 0.0 so signed zeros tie on id
        Ok(dot.clamp(-1.0, 1.0) + 0.0)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        EmbeddingVector::from_raw(values).map_err(serde::de::Error::custom)
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Cosine similarity `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0) + 0.0)
}

/// Anything that turns text into unit vectors.
pub trait Embedder: Send + Sync {
    /// Embeds a batch, preserving input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::BackendProtocol("embedder returned no vector".into()))
    }

    /// Output dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;
}

/// Bucket index and sign for every token of `text`, in token order.
pub fn token_buckets(text: &str, dim: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if dim < 1 {
        return Err(Error::InvalidDim(dim));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(tokens
        .iter()
        .map(|tok| {
            let bucket = (seeded_hash(tok, seed) % dim as u64) as usize;
            let sign = if seeded_hash(tok, seed ^ SIGN_SALT) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            (bucket, sign)
        })
        .collect())
}

/// Signed feature-hashing embedding: each token adds ±1 to one bucket,
/// then the count vector is normalized.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    let mut counts = vec![0.0; dim.max(1)];
    for (bucket, sign) in token_buckets(text, dim, seed)? {
        counts[bucket] += sign;
    }
    if counts.iter().all(|c| *c == 0.0) {
        // Every token cancelled out. Fall back to unsigned counts so the
        // vector stays defined.
        for (bucket, _) in token_buckets(text, dim, seed)? {
            counts[bucket] += 1.0;
        }
    }
    EmbeddingVector::from_raw(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::InvalidDim(dim));
        }
        Ok(Self { dim, seed })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: Self::DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl Embedder for HashEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| hash_embed(t, self.dim, self.seed))
            .collect()
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    dim: Option<usize>,
}

/// Client for an HTTP sentence-embedding service.
///
/// `POST {url}` with `{"texts": [...]}`, expects
/// `{"embeddings": [[...], ...], "dim": n}`. The underlying agent is
/// thread-safe, so concurrent batches are allowed.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub const ENV_URL: &'static str = "RIT_EMBED_URL";

    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: http_agent(),
        }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var(Self::ENV_URL)
            .map(Self::new)
            .map_err(|_| Error::InvalidConfig(format!("{} is not set", Self::ENV_URL)))
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("empty embedding batch".into()));
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::EmptyText);
        }
        let body: EmbedResponse = post_json(&self.agent, &self.url, &EmbedRequest { texts })?;
        if body.embeddings.len() != texts.len() {
            return Err(Error::BackendProtocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        let dim = body.dim.unwrap_or_else(|| body.embeddings[0].len());
        if let Some(bad) = body.embeddings.iter().find(|v| v.len() != dim) {
            return Err(Error::BackendProtocol(format!(
                "inconsistent dimensions in batch: {} vs {}",
                dim,
                bad.len()
            )));
        }
        body.embeddings
            .into_iter()
            .map(|v| {
                EmbeddingVector::from_raw(v).map_err(|e| Error::BackendProtocol(e.to_string()))
            })
            .collect()
    }

    fn dim(&self) -> Option<usize> {
        None
    }
}

pub(crate) fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .http_status_as_error(false)
        .build()
        .into()
}

pub(crate) fn post_json<B: Serialize, R: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &B,
) -> Result<R> {
    let mut response = agent
        .post(url)
        .send_json(body)
        .map_err(|e| Error::BackendUnavailable(format!("{url}: {e}")))?;
    let status = response.status();
    if !status.is_success() {
        return Err(Error::BackendUnavailable(format!("{url}: HTTP {status}")));
    }
    response
        .body_mut()
        .read_json()
        .map_err(|e| Error::BackendProtocol(format!("{url}: {e}")))
}

/// Embeddings read from a tab-separated table.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedTable {
    pub vectors: HashMap<String, EmbeddingVector>,
    /// Rows whose text repeated an earlier row (the later row wins).
    pub duplicate_warnings: usize,
    pub dim: Option<usize>,
}

/// Reads `text<TAB>v1,v2,...` lines. Blank lines are skipped.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedTable> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    parse_precomputed(&raw)
}

pub fn parse_precomputed(raw: &str) -> Result<PrecomputedTable> {
    let mut table = PrecomputedTable::default();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, nums) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::parse(line_no, "missing tab separator"))?;
        if text.is_empty() {
            return Err(Error::parse(line_no, "empty text key"));
        }
        let values = nums
            .split(',')
            .map(|n| n.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(line_no, format!("bad number: {e}")))?;
        let vector =
            EmbeddingVector::from_raw(values).map_err(|e| Error::parse(line_no, e.to_string()))?;
        match table.dim {
            Some(d) if d != vector.dim() => {
                return Err(Error::parse(
                    line_no,
                    format!("dimension {} differs from earlier rows ({d})", vector.dim()),
                ))
            }
            _ => table.dim = Some(vector.dim()),
        }
        if table.vectors.insert(text.to_owned(), vector).is_some() {
            log::warn!("duplicate embedding key on line {line_no}: {text:?}");
            table.duplicate_warnings += 1;
        }
    }
    Ok(table)
}

/// Serves embeddings from a [`PrecomputedTable`]; unknown texts are an error.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    table: PrecomputedTable,
}

impl PrecomputedEmbedder {
    pub fn new(table: PrecomputedTable) -> Self {
        Self { table }
    }
}

impl Embedder for PrecomputedEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .vectors
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("no precomputed embedding for {t:?}")))
            })
            .collect()
    }

    fn dim(&self) -> Option<usize> {
        self.table.dim
    }
}
