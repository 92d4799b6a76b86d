//! Per-course hybrid index: an inverted index with BM25 statistics plus an
//! exact embedding matrix, persisted on an [`ObjectStore`].

mod persist;
mod s3;
mod store;

pub use persist::{
    finalize_upload, index_prefix, load_index, manifest_key, persist_index, raw_prefix,
    read_vectors_bin, write_vectors_bin, Manifest, VECTORS_FORMAT_VERSION, VECTORS_MAGIC,
};
pub use s3::{S3Config, S3Store};
pub use store::{validate_key, FsStore, MemoryStore, ObjectStore, StoreError};

use crate::chunker::{Chunk, ChunkId, EmbeddingVector};
use crate::error::{Error, Result};
use crate::text::index_terms;
use chrono::{DateTime, Utc};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct CourseIndex {
    pub course_id: String,
    /// Chunk table; `chunks[i].chunk_id == ChunkId(i)`.
    pub chunks: Vec<Chunk>,
    /// term → postings sorted by chunk id, every tf ≥ 1.
    pub postings: BTreeMap<String, Vec<(ChunkId, u32)>>,
    /// Indexed token count per chunk, by chunk id.
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub dims: usize,
    /// Row-major `n_chunks × dims`.
    pub vectors: Vec<f64>,
    pub manifest_version: u64,
    pub created_at: DateTime<Utc>,
}

impl CourseIndex {
    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn vector(&self, id: ChunkId) -> &[f64] {
        let row = id.0 as usize;
        &self.vectors[row * self.dims..(row + 1) * self.dims]
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&Chunk> {
        self.chunks.get(id.0 as usize)
    }

    /// Number of chunks containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Embedding rows, in chunk order.
    pub fn embeddings(&self) -> Vec<EmbeddingVector> {
        self.vectors
            .chunks(self.dims)
            .map(|row| EmbeddingVector {
                values: row.to_vec(),
            })
            .collect()
    }

    /// Check the structural invariants. Used when loading from storage.
    pub fn validate(&self) -> Result<()> {
        let n = self.chunks.len();
        let corrupt = |msg: String| Err(Error::CorruptIndex(msg));
        if n == 0 {
            return corrupt("index has no chunks".into());
        }
        for (i, c) in self.chunks.iter().enumerate() {
            if c.chunk_id.0 as usize != i {
                return corrupt(format!("chunk {i} has id {}", c.chunk_id));
            }
        }
        if self.doc_lengths.len() != n {
            return corrupt("doc_lengths length differs from chunk count".into());
        }
        if self.dims == 0 || self.vectors.len() != n * self.dims {
            return corrupt("vector matrix shape does not match chunk count".into());
        }
        let mut tf_sums = vec![0u64; n];
        for (term, list) in &self.postings {
            let mut prev: Option<ChunkId> = None;
            for &(id, tf) in list {
                if id.0 as usize >= n {
                    return corrupt(format!("posting for {term:?} references missing {id}"));
                }
                if tf == 0 {
                    return corrupt(format!("zero term frequency for {term:?}"));
                }
                if prev.is_some_and(|p| p >= id) {
                    return corrupt(format!("postings for {term:?} not strictly ordered"));
                }
                prev = Some(id);
                tf_sums[id.0 as usize] += u64::from(tf);
            }
        }
        for (i, (&len, &sum)) in self.doc_lengths.iter().zip(&tf_sums).enumerate() {
            if u64::from(len) != sum {
                return corrupt(format!("chunk {i}: doc length {len} but postings sum {sum}"));
            }
        }
        let mean = mean_length(&self.doc_lengths);
        if (mean - self.avg_doc_length).abs() > 1e-9 * mean.max(1.0) {
            return corrupt("avg_doc_length does not match doc lengths".into());
        }
        Ok(())
    }
}

fn mean_length(lengths: &[u32]) -> f64 {
    if lengths.is_empty() {
        return 0.0;
    }
    lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / lengths.len() as f64
}

/// Build a course index. Chunks are renumbered so that chunk ids are their
/// positions in `chunks`. The new index gets `previous_version + 1`, or 1.
pub fn build_index(
    course_id: &str,
    chunks: Vec<Chunk>,
    embeddings: &[EmbeddingVector],
    previous_version: Option<u64>,
) -> Result<CourseIndex> {
    if chunks.is_empty() || embeddings.is_empty() {
        return Err(Error::EmptyCourse);
    }
    if chunks.len() != embeddings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} chunks but {} embeddings",
            chunks.len(),
            embeddings.len()
        )));
    }
    let dims = embeddings[0].dims();
    if dims == 0 {
        return Err(Error::EmptyInput);
    }
    let mut vectors = Vec::with_capacity(dims * embeddings.len());
    for e in embeddings {
        if e.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: e.dims(),
            });
        }
        vectors.extend_from_slice(&e.values);
    }

    let mut postings: BTreeMap<String, Vec<(ChunkId, u32)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(chunks.len());
    let chunks: Vec<Chunk> = chunks
        .into_iter()
        .enumerate()
        .map(|(i, mut c)| {
            c.chunk_id = ChunkId(i as u32);
            c
        })
        .collect();
    for chunk in &chunks {
        let terms = index_terms(&chunk.text);
        doc_lengths.push(terms.len() as u32);
        let mut counts: HashMap<String, u32> = HashMap::new();
        for t in terms {
            *counts.entry(t).or_default() += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push((chunk.chunk_id, tf));
        }
    }

    Ok(CourseIndex {
        course_id: course_id.to_owned(),
        avg_doc_length: mean_length(&doc_lengths),
        chunks,
        postings,
        doc_lengths,
        dims,
        vectors,
        manifest_version: previous_version.map_or(1, |v| v + 1),
        created_at: Utc::now(),
    })
}
