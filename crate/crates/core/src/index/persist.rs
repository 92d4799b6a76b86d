//! On-store layout of a course index:
//!
//! ```text
//! courses/<slug>/index/postings.jsonl   {"term": ..., "postings": [[chunk_id, tf], ...]} per line
//! courses/<slug>/index/vectors.bin      "VRIX" | u32 version | u32 n | u32 dims | f32[n*dims] | u64 length
//! courses/<slug>/index/manifest.json    written last; its presence marks a complete index
//! courses/<slug>/raw/                   uploaded sources awaiting indexing
//! ```
//!
//! All integers and floats are little-endian. The trailing u64 is the byte
//! length of everything before it.

use super::store::{ObjectStore, StoreError};
use super::CourseIndex;
use crate::chunker::{Chunk, ChunkId};
use crate::error::{Error, Result};
use crate::text::{slug, stopwords_sha256};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const VECTORS_MAGIC: &[u8; 4] = b"VRIX";
pub const VECTORS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub course_id: String,
    pub manifest_version: u64,
    pub n_chunks: usize,
    pub dims: usize,
    pub avg_doc_length: f64,
    pub stopwords_sha256: String,
    pub vectors_sha256: String,
    pub created_at: DateTime<Utc>,
    pub postings_sha256: String,
    /// The chunk table. Kept here so the three index objects are
    /// self-contained.
    pub chunks: Vec<Chunk>,
}

#[derive(Serialize, Deserialize)]
struct PostingLine {
    term: String,
    postings: Vec<(ChunkId, u32)>,
}

pub fn index_prefix(course: &str) -> String {
    format!("courses/{}/index/", slug(course))
}

pub fn raw_prefix(course: &str) -> String {
    format!("courses/{}/raw/", slug(course))
}

pub fn manifest_key(course: &str) -> String {
    format!("{}manifest.json", index_prefix(course))
}

fn postings_key(course: &str) -> String {
    format!("{}postings.jsonl", index_prefix(course))
}

fn vectors_key(course: &str) -> String {
    format!("{}vectors.bin", index_prefix(course))
}

pub fn write_vectors_bin(n_chunks: usize, dims: usize, vectors: &[f64]) -> Vec<u8> {
    debug_assert_eq!(vectors.len(), n_chunks * dims);
    let mut out = Vec::with_capacity(16 + vectors.len() * 4 + 8);
    out.extend_from_slice(VECTORS_MAGIC);
    out.extend_from_slice(&VECTORS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_chunks as u32).to_le_bytes());
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    for v in vectors {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let len = out.len() as u64;
    out.extend_from_slice(&len.to_le_bytes());
    out
}

/// Parse `vectors.bin`, returning `(n_chunks, dims, row-major values)`.
pub fn read_vectors_bin(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let corrupt = |m: &str| Error::CorruptIndex(format!("vectors.bin: {m}"));
    if bytes.len() < 24 {
        return Err(corrupt("too short"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if &bytes[..4] != VECTORS_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if u32_at(4) != VECTORS_FORMAT_VERSION {
        return Err(corrupt("unsupported format version"));
    }
    let n = u32_at(8) as usize;
    let dims = u32_at(12) as usize;
    let body_end = bytes.len() - 8;
    let footer = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if footer != body_end as u64 {
        return Err(corrupt("length footer mismatch"));
    }
    let expected = n
        .checked_mul(dims)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(16));
    if expected != Some(body_end) {
        return Err(corrupt("payload size does not match header"));
    }
    let values = bytes[16..body_end]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok((n, dims, values))
}

fn read_manifest(course: &str, store: &dyn ObjectStore) -> Result<Option<Manifest>> {
    match store.get(&manifest_key(course)) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes).map_err(|e| {
            Error::CorruptIndex(format!("manifest.json: {e}"))
        })?)),
        Err(StoreError::NotFound(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Write `index` under `courses/<slug(course)>/index/` and return the
/// manifest key.
///
/// If the store already holds this version or a later one, the index is
/// bumped past it first, so repeated persists always increase the version.
/// The old manifest is removed before the data objects are rewritten and the
/// new one is written last, so a failed persist leaves no manifest rather
/// than one that describes objects it does not match.
pub fn persist_index(index: &mut CourseIndex, course: &str, store: &dyn ObjectStore) -> Result<String> {
    let existing = match read_manifest(course, store) {
        Ok(m) => m,
        // a corrupt manifest is about to be replaced
        Err(Error::CorruptIndex(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(m) = &existing {
        if m.manifest_version >= index.manifest_version {
            index.manifest_version = m.manifest_version + 1;
        }
    }

    let mut postings = Vec::new();
    for (term, list) in &index.postings {
        serde_json::to_writer(
            &mut postings,
            &PostingLine {
                term: term.clone(),
                postings: list.clone(),
            },
        )?;
        postings.push(b'\n');
    }
    let vectors = write_vectors_bin(index.n_chunks(), index.dims, &index.vectors);
    let manifest = Manifest {
        course_id: index.course_id.clone(),
        manifest_version: index.manifest_version,
        n_chunks: index.n_chunks(),
        dims: index.dims,
        avg_doc_length: index.avg_doc_length,
        stopwords_sha256: stopwords_sha256(),
        vectors_sha256: hex::encode(Sha256::digest(&vectors)),
        created_at: index.created_at,
        postings_sha256: hex::encode(Sha256::digest(&postings)),
        chunks: index.chunks.clone(),
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;

    let key = manifest_key(course);
    store.delete(&key)?;
    store.put(&postings_key(course), &postings)?;
    store.put(&vectors_key(course), &vectors)?;
    store.put(&key, &manifest_bytes)?;
    Ok(key)
}

pub fn load_index(course: &str, store: &dyn ObjectStore) -> Result<CourseIndex> {
    let manifest = read_manifest(course, store)?.ok_or(Error::IndexNotFound)?;
    let fetch = |key: String| match store.get(&key) {
        Ok(bytes) => Ok(bytes),
        Err(StoreError::NotFound(k)) => Err(Error::CorruptIndex(format!("missing object {k}"))),
        Err(e) => Err(e.into()),
    };
    let postings_bytes = fetch(postings_key(course))?;
    let vectors_bytes = fetch(vectors_key(course))?;

    if hex::encode(Sha256::digest(&vectors_bytes)) != manifest.vectors_sha256 {
        return Err(Error::CorruptIndex("vectors.bin checksum mismatch".into()));
    }
    if hex::encode(Sha256::digest(&postings_bytes)) != manifest.postings_sha256 {
        return Err(Error::CorruptIndex("postings.jsonl checksum mismatch".into()));
    }
    if manifest.stopwords_sha256 != stopwords_sha256() {
        return Err(Error::CorruptIndex(
            "index was built with a different stopword list".into(),
        ));
    }
    let (n, dims, vectors) = read_vectors_bin(&vectors_bytes)?;
    if n != manifest.n_chunks || dims != manifest.dims || manifest.chunks.len() != n {
        return Err(Error::CorruptIndex("manifest disagrees with vectors.bin".into()));
    }

    let text = std::str::from_utf8(&postings_bytes)
        .map_err(|_| Error::CorruptIndex("postings.jsonl is not UTF-8".into()))?;
    let mut postings = BTreeMap::new();
    let mut doc_lengths = vec![0u32; n];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: PostingLine = serde_json::from_str(line)
            .map_err(|e| Error::CorruptIndex(format!("postings.jsonl: {e}")))?;
        for &(id, tf) in &parsed.postings {
            let slot = doc_lengths
                .get_mut(id.0 as usize)
                .ok_or_else(|| Error::CorruptIndex(format!("posting references missing {id}")))?;
            *slot += tf;
        }
        postings.insert(parsed.term, parsed.postings);
    }

    let index = CourseIndex {
        course_id: manifest.course_id,
        chunks: manifest.chunks,
        postings,
        doc_lengths,
        avg_doc_length: manifest.avg_doc_length,
        dims,
        vectors,
        manifest_version: manifest.manifest_version,
        created_at: manifest.created_at,
    };
    index.validate()?;
    Ok(index)
}

/// Remove the raw uploaded source of `doc_id` once its course index is
/// persisted. Deleting an already-deleted upload succeeds.
pub fn finalize_upload(course: &str, doc_id: &str, store: &dyn ObjectStore) -> Result<()> {
    let prefix = raw_prefix(course);
    for key in store.list(&prefix)? {
        let name = &key[prefix.len()..];
        let stem = name.split_once('.').map_or(name, |(stem, _)| stem);
        if stem == doc_id {
            store.delete(&key)?;
        }
    }
    Ok(())
}
