//! Segmentation into retrieval granules, and embeddings.

use crate::error::{Error, Result};
use crate::text::{fnv1a64, index_terms};
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const DEFAULT_MAX_CHUNK_WORDS: usize = 512;
pub const DEFAULT_OVERLAP_WORDS: usize = 64;
pub const LOCAL_EMBEDDING_DIMS: usize = 384;

/// Position of a chunk within its course index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub u32);

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub doc_id: String,
    /// 0-based position within the source document.
    pub ordinal: u32,
    pub text: String,
    pub word_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkParams {
    pub max_chunk_words: usize,
    pub overlap_words: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            max_chunk_words: DEFAULT_MAX_CHUNK_WORDS,
            overlap_words: DEFAULT_OVERLAP_WORDS,
        }
    }
}

/// Split `text` into chunks: blank-line separated paragraphs first, and any
/// paragraph longer than `max_chunk_words` into overlapping windows. Chunk
/// text is the paragraph's words joined by single spaces. Chunk ids are the
/// document ordinals; the index renumbers them course-wide.
pub fn chunk_text(doc_id: &str, text: &str, params: ChunkParams) -> Result<Vec<Chunk>> {
    let ChunkParams {
        max_chunk_words: max,
        overlap_words: overlap,
    } = params;
    if max == 0 || overlap >= max {
        return Err(Error::InvalidArgument(format!(
            "need max_chunk_words > overlap_words >= 0, got {max} and {overlap}"
        )));
    }
    let mut pieces: Vec<Vec<&str>> = Vec::new();
    for paragraph in split_paragraphs(text) {
        let words: Vec<&str> = paragraph.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        if words.len() <= max {
            pieces.push(words);
            continue;
        }
        let stride = max - overlap;
        let mut start = 0;
        loop {
            let end = (start + max).min(words.len());
            pieces.push(words[start..end].to_vec());
            if end == words.len() {
                break;
            }
            start += stride;
        }
    }
    if pieces.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, words)| Chunk {
            chunk_id: ChunkId(i as u32),
            doc_id: doc_id.to_owned(),
            ordinal: i as u32,
            word_count: words.len() as u32,
            text: words.join(" "),
        })
        .collect())
}

fn split_paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_blank = false;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if blank && !prev_blank {
            out.push(&text[start..offset]);
        }
        if !blank && prev_blank {
            start = offset;
        }
        prev_blank = blank;
        offset += line.len();
    }
    if !prev_blank {
        out.push(&text[start..]);
    }
    out
}

/// A dense embedding. Local embeddings are unit length or all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Anything that maps text to a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn dims(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Offline embedder: hashed bag of words. Tokens are the index terms
/// (lowercase alphanumerics, stopwords dropped), each adds its count to
/// bucket `fnv1a64(token) % dims`, and the result is L2-normalized.
#[derive(Debug, Clone)]
pub struct LocalEmbedder {
    dims: usize,
}

impl LocalEmbedder {
    pub fn new(dims: usize) -> Self {
        assert!(dims > 0, "embedding dims must be positive");
        Self { dims }
    }
}

impl Default for LocalEmbedder {
    fn default() -> Self {
        Self::new(LOCAL_EMBEDDING_DIMS)
    }
}

impl Embedder for LocalEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut values = vec![0.0; self.dims];
        for term in index_terms(text) {
            values[(fnv1a64(term.as_bytes()) % self.dims as u64) as usize] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingVector { values })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Model endpoint speaking `{model, input}` → `{embedding: [f64]}` over HTTP.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dims: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dims: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dims,
            client,
        })
    }
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

impl Embedder for RemoteEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut req = self.client.post(&self.endpoint).json(&EmbedRequest {
            model: &self.model,
            input: text,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::ProviderUnreachable(e.without_url().to_string()))?;
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Error::ProviderUnreachable(e.without_url().to_string()))?;
        if body.embedding.len() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                got: body.embedding.len(),
            });
        }
        EmbeddingVector::new(body.embedding)
    }
}
