//! ROUGE-N and ROUGE-L over lowercase whitespace tokens.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(c: OverlapCounts) -> Self {
        if c.candidate_total == 0 || c.reference_total == 0 {
            // texts too short to form any n-gram
            let same = c.candidate_total == c.reference_total && c.overlap == 1;
            let v = if same { 1.0 } else { 0.0 };
            return Self { precision: v, recall: v, f1: v };
        }
        let precision = c.overlap as f64 / c.candidate_total as f64;
        let recall = c.overlap as f64 / c.reference_total as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Exact integer form of a score: precision is `overlap / candidate_total`,
/// recall is `overlap / reference_total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub overlap: usize,
    pub candidate_total: usize,
    pub reference_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeMetric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl std::str::FromStr for RougeMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge1" => Ok(RougeMetric::Rouge1),
            "rouge2" => Ok(RougeMetric::Rouge2),
            "rougeL" => Ok(RougeMetric::RougeL),
            other => Err(Error::InvalidArgument(format!("unknown metric {other}; expected rouge1, rouge2 or rougeL"))),
        }
    }
}

impl RougeMetric {
    pub fn score(self, candidate: &str, reference: &str) -> Result<RougeScore> {
        match self {
            RougeMetric::Rouge1 => rouge_n(candidate, reference, 1),
            RougeMetric::Rouge2 => rouge_n(candidate, reference, 2),
            RougeMetric::RougeL => rouge_l(candidate, reference),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn tokens_of_both(candidate: &str, reference: &str) -> Result<(Vec<String>, Vec<String>)> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok((c, r))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn ngram_overlap(candidate: &str, reference: &str, n: usize) -> Result<OverlapCounts> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let (c, r) = tokens_of_both(candidate, reference)?;
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let mut overlap: usize = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    let candidate_total = c.len().saturating_sub(n - 1);
    let reference_total = r.len().saturating_sub(n - 1);
    if candidate_total == 0 || reference_total == 0 {
        // marks identical too-short texts for `from_counts`
        overlap = usize::from(c == r);
    }
    Ok(OverlapCounts { overlap, candidate_total, reference_total })
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore> {
    ngram_overlap(candidate, reference, n).map(RougeScore::from_counts)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn lcs_overlap(candidate: &str, reference: &str) -> Result<OverlapCounts> {
    let (c, r) = tokens_of_both(candidate, reference)?;
    Ok(OverlapCounts {
        overlap: lcs_len(&c, &r),
        candidate_total: c.len(),
        reference_total: r.len(),
    })
}

pub fn rouge_l(candidate: &str, reference: &str) -> Result<RougeScore> {
    lcs_overlap(candidate, reference).map(RougeScore::from_counts)
}
