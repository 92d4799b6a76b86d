//! Keyword-augmented hybrid retrieval over a [`CourseIndex`].

use crate::chunker::{cosine_similarity, ChunkId, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::CourseIndex;
use crate::llm::LlmClient;
use crate::text::{index_terms, is_stopword};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_KEYWORDS: usize = 8;
pub const DEFAULT_RRF_K: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    /// `alpha · minmax(bm25) + (1 − alpha) · minmax(cosine)`.
    WeightedSum,
    /// Weighted reciprocal-rank fusion, rescaled into [0, 1]. Kept for
    /// comparison; it ignores score magnitudes.
    ReciprocalRank { k: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub alpha: f64,
    pub bm25: Bm25Params,
    pub fusion: Fusion,
    /// Chunks must have cosine similarity strictly above this to enter the
    /// candidate set through the vector side.
    pub min_cosine: f64,
    pub max_keywords: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            bm25: Bm25Params::default(),
            fusion: Fusion::WeightedSum,
            min_cosine: 0.0,
            max_keywords: DEFAULT_KEYWORDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub raw_text: String,
    pub keywords: Vec<String>,
    pub embedding: EmbeddingVector,
    /// No usable keywords survived extraction; lexical scoring contributes
    /// nothing.
    pub vector_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk_id: ChunkId,
    pub bm25_score: f64,
    pub cosine_score: f64,
    pub fused_score: f64,
    pub rank: usize,
}

/// BM25 inverse document frequency, `ln((N − df + 0.5)/(df + 0.5) + 1)`.
pub fn idf(n_chunks: usize, df: usize) -> f64 {
    let (n, df) = (n_chunks as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

fn normalize_keywords<'a>(terms: impl IntoIterator<Item = &'a str>, k: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for term in terms {
        for t in index_terms(term) {
            if !is_stopword(&t) && seen.insert(t.clone()) {
                out.push(t);
            }
        }
    }
    out.truncate(k);
    out
}

fn keyword_prompt(raw_text: &str, k: usize) -> String {
    format!(
        "Extract up to {k} search keywords from the question below. \
         Reply with the keywords only, separated by commas.\n\nQuestion: {raw_text}"
    )
}

/// Salient lowercase terms of a question, at most `k`.
///
/// With an LLM client the model proposes keywords; otherwise, or when the
/// model fails or proposes nothing usable, query terms are ranked by IDF
/// over the index (unseen terms rank highest) with ties kept in query order.
pub fn extract_keywords(
    raw_text: &str,
    index: &CourseIndex,
    llm: Option<&dyn LlmClient>,
    k: usize,
) -> Result<Vec<String>> {
    if raw_text.trim().is_empty() {
        return Err(Error::EmptyQuery);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("keyword count must be at least 1".into()));
    }
    if let Some(llm) = llm {
        match llm.complete(&keyword_prompt(raw_text, k)) {
            Ok(reply) => {
                let keywords = normalize_keywords(reply.split([',', '\n', ';']), k);
                if !keywords.is_empty() {
                    return Ok(keywords);
                }
            }
            Err(e) => tracing::warn!(error = %e, "keyword extraction fell back to IDF ranking"),
        }
    }
    let mut terms = normalize_keywords([raw_text], usize::MAX);
    let n = index.n_chunks();
    // stable sort keeps query order among equal IDF
    terms.sort_by(|a, b| idf(n, index.doc_freq(b)).total_cmp(&idf(n, index.doc_freq(a))));
    terms.truncate(k);
    Ok(terms)
}

/// Okapi BM25 for every chunk matching at least one keyword. Keywords are
/// treated as a set.
pub fn bm25_scores(keywords: &[String], index: &CourseIndex, params: Bm25Params) -> HashMap<ChunkId, f64> {
    let n = index.n_chunks();
    let avgdl = index.avg_doc_length;
    let unique: BTreeSet<&str> = keywords.iter().map(String::as_str).collect();
    let mut scores: HashMap<ChunkId, f64> = HashMap::new();
    for term in unique {
        let Some(list) = index.postings.get(term) else {
            continue;
        };
        let term_idf = idf(n, list.len());
        for &(id, tf) in list {
            let tf = f64::from(tf);
            let len = f64::from(index.doc_lengths[id.0 as usize]);
            let norm = if avgdl > 0.0 { len / avgdl } else { 0.0 };
            let denom = tf + params.k1 * (1.0 - params.b + params.b * norm);
            *scores.entry(id).or_insert(0.0) += term_idf * tf * (params.k1 + 1.0) / denom;
        }
    }
    scores
}

fn by_score_then_id(a: &(ChunkId, f64), b: &(ChunkId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact cosine scan: top `k` chunks, best first, ties by ascending chunk id.
pub fn vector_scores(query: &EmbeddingVector, index: &CourseIndex, k: usize) -> Result<Vec<(ChunkId, f64)>> {
    let mut all = all_cosines(query, index)?;
    all.sort_by(by_score_then_id);
    all.truncate(k);
    Ok(all)
}

fn all_cosines(query: &EmbeddingVector, index: &CourseIndex) -> Result<Vec<(ChunkId, f64)>> {
    if query.dims() != index.dims {
        return Err(Error::DimensionMismatch {
            expected: index.dims,
            got: query.dims(),
        });
    }
    (0..index.n_chunks() as u32)
        .map(|i| {
            let id = ChunkId(i);
            Ok((id, cosine_similarity(&query.values, index.vector(id))?))
        })
        .collect()
}

/// Raw per-family scores of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub chunk_id: ChunkId,
    pub bm25: f64,
    pub cosine: f64,
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    move |v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 }
}

fn ranks(candidates: &[Candidate], score: impl Fn(&Candidate) -> f64) -> HashMap<ChunkId, usize> {
    let mut order: Vec<(ChunkId, f64)> = candidates.iter().map(|c| (c.chunk_id, score(c))).collect();
    order.sort_by(by_score_then_id);
    order.into_iter().enumerate().map(|(i, (id, _))| (id, i + 1)).collect()
}

/// Fuse a fixed candidate table into a ranked list: fused score descending,
/// ties by ascending chunk id, ranks from 1.
pub fn fuse(candidates: &[Candidate], alpha: f64, fusion: Fusion) -> Vec<RetrievalResult> {
    let fused: Vec<f64> = match fusion {
        Fusion::WeightedSum => {
            let bm25_norm = min_max(candidates.iter().map(|c| c.bm25));
            let cos_norm = min_max(candidates.iter().map(|c| c.cosine));
            candidates
                .iter()
                .map(|c| alpha * bm25_norm(c.bm25) + (1.0 - alpha) * cos_norm(c.cosine))
                .collect()
        }
        Fusion::ReciprocalRank { k } => {
            let bm25_rank = ranks(candidates, |c| c.bm25);
            let cos_rank = ranks(candidates, |c| c.cosine);
            let top = 1.0 / (k + 1.0);
            candidates
                .iter()
                .map(|c| {
                    let lexical = if c.bm25 > 0.0 { 1.0 / (k + bm25_rank[&c.chunk_id] as f64) } else { 0.0 };
                    let semantic = 1.0 / (k + cos_rank[&c.chunk_id] as f64);
                    (alpha * lexical + (1.0 - alpha) * semantic) / top
                })
                .collect()
        }
    };
    let mut results: Vec<RetrievalResult> = candidates
        .iter()
        .zip(fused)
        .map(|(c, f)| RetrievalResult {
            chunk_id: c.chunk_id,
            bm25_score: c.bm25,
            cosine_score: c.cosine,
            fused_score: f.clamp(0.0, 1.0),
            rank: 0,
        })
        .collect();
    results.sort_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then(a.chunk_id.cmp(&b.chunk_id))
    });
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

/// The candidate table `hybrid_retrieve` fuses: the union of the BM25
/// top-2k and the cosine top-2k (above `min_cosine`), each with both raw
/// scores. Chunks without a lexical match have BM25 score 0.
pub fn candidates(query: &Query, index: &CourseIndex, config: &RetrievalConfig) -> Result<Vec<Candidate>> {
    if index.n_chunks() == 0 {
        return Err(Error::EmptyIndex);
    }
    let depth = config.k.saturating_mul(2);
    let bm25 = bm25_scores(&query.keywords, index, config.bm25);
    let mut lexical: Vec<(ChunkId, f64)> = bm25.iter().map(|(&id, &s)| (id, s)).collect();
    lexical.sort_by(by_score_then_id);
    lexical.truncate(depth);

    let cosines = all_cosines(&query.embedding, index)?;
    let mut semantic: Vec<(ChunkId, f64)> = cosines
        .iter()
        .copied()
        .filter(|&(_, c)| c > config.min_cosine)
        .collect();
    semantic.sort_by(by_score_then_id);
    semantic.truncate(depth);

    let ids: BTreeSet<ChunkId> = lexical.iter().chain(&semantic).map(|&(id, _)| id).collect();
    Ok(ids
        .into_iter()
        .map(|id| Candidate {
            chunk_id: id,
            bm25: bm25.get(&id).copied().unwrap_or(0.0),
            cosine: cosines[id.0 as usize].1,
        })
        .collect())
}

/// Hybrid retrieval: fuse the candidate table and keep the top `k`. An empty
/// result means nothing in the course matched the question at all.
pub fn hybrid_retrieve(query: &Query, index: &CourseIndex, config: &RetrievalConfig) -> Result<Vec<RetrievalResult>> {
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
    }
    let table = candidates(query, index, config)?;
    let mut results = fuse(&table, config.alpha, config.fusion);
    results.truncate(config.k);
    Ok(results)
}

/// Keywords plus embedding for a raw question.
pub fn build_query(
    raw_text: &str,
    index: &CourseIndex,
    embedder: &dyn Embedder,
    llm: Option<&dyn LlmClient>,
    max_keywords: usize,
) -> Result<Query> {
    let keywords = extract_keywords(raw_text, index, llm, max_keywords)?;
    let embedding = embedder.embed(raw_text)?;
    if embedding.dims() != index.dims {
        return Err(Error::DimensionMismatch {
            expected: index.dims,
            got: embedding.dims(),
        });
    }
    Ok(Query {
        raw_text: raw_text.to_owned(),
        vector_only: keywords.is_empty(),
        keywords,
        embedding,
    })
}
