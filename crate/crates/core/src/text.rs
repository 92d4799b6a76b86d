//! Tokenization shared by the index, the retriever and the local embedder.

use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::sync::OnceLock;

/// Fixed English stopword list. Its SHA-256 is recorded in every index
/// manifest, so changing it invalidates persisted indices.
pub const STOPWORDS: [&str; 50] = [
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he",
    "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "not", "of", "on", "or",
    "she", "so", "that", "the", "their", "then", "there", "these", "they", "this", "to", "was",
    "we", "were", "what", "when", "where", "which", "who", "will", "with", "you",
];

fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

pub fn is_stopword(term: &str) -> bool {
    stopword_set().contains(term)
}

/// Hex SHA-256 over the newline-joined stopword list.
pub fn stopwords_sha256() -> String {
    let mut hasher = Sha256::new();
    for word in STOPWORDS {
        hasher.update(word.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Lowercase, split on anything that is not alphanumeric. Keeps stopwords.
pub fn raw_terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Index tokenizer: [`raw_terms`] with stopwords removed. No stemming.
pub fn index_terms(text: &str) -> Vec<String> {
    raw_terms(text).filter(|t| !is_stopword(t)).collect()
}

/// Course-title slug: lowercase ASCII alphanumerics separated by single
/// hyphens. Idempotent, so a slug can be passed anywhere a title is accepted.
pub fn slug(title: &str) -> String {
    let mut out = String::with_capacity(title.len());
    let mut pending_dash = false;
    for c in title.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.push(c);
        } else {
            pending_dash = true;
        }
    }
    if out.is_empty() {
        // titles with no ASCII alphanumerics still need a stable key
        let digest = Sha256::digest(title.as_bytes());
        out = format!("course-{}", &hex::encode(digest)[..12]);
    }
    out
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
