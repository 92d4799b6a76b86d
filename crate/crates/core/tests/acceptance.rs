//! Acceptance suite. Each criterion runs in isolation and prints one
//! `PASS`/`FAIL` line; the test fails if any criterion fails.
//!
//! Run with `cargo test -p coursekb --test acceptance -- --nocapture`.

mod common;

use common::MockLlm;
use coursekb::analytics::{lcs_len, lcs_overlap, ngram_overlap, rouge_l, rouge_n, OverlapCounts, QuizQuestion};
use coursekb::chat::{compose_reply, render_prompt, ChatOptions, PromptMode, REFUSAL};
use coursekb::chunker::{chunk_text, cosine_similarity, Chunk, ChunkId, ChunkParams, Embedder, EmbeddingVector, LocalEmbedder};
use coursekb::courses::{Plan, Role, Visibility};
use coursekb::db::Db;
use coursekb::index::{
    build_index, load_index, manifest_key, persist_index, raw_prefix, CourseIndex, MemoryStore, ObjectStore, StoreError,
};
use coursekb::ingest::{clean_transcript, TranscriptEntry};
use coursekb::retrieve::{bm25_scores, fuse, vector_scores, Bm25Params, Candidate, Fusion, DEFAULT_RRF_K};
use coursekb::service::index_document;
use coursekb::text::STOPWORDS;
use coursekb::Error;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use regex::Regex;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

const SEED: u64 = 0x5eed_2025;

type Criterion = (&'static str, fn() -> String);

fn golden(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(rel)
}

fn chunk(i: usize, text: String) -> Chunk {
    Chunk {
        chunk_id: ChunkId(i as u32),
        doc_id: format!("d{}", i % 3),
        ordinal: i as u32,
        word_count: text.split_whitespace().count() as u32,
        text,
    }
}

fn random_vector(rng: &mut StdRng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn random_index(rng: &mut StdRng, texts: Vec<String>, dims: usize) -> CourseIndex {
    let n = texts.len();
    let chunks: Vec<Chunk> = texts.into_iter().enumerate().map(|(i, t)| chunk(i, t)).collect();
    let vectors: Vec<EmbeddingVector> = (0..n)
        .map(|_| EmbeddingVector::new(random_vector(rng, dims)).unwrap())
        .collect();
    build_index("acceptance", chunks, &vectors, None).unwrap()
}

// ---------------------------------------------------------------- BM25

fn oracle_terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            if !STOPWORDS.contains(&word.as_str()) {
                out.push(word.clone());
            }
            word.clear();
        }
    }
    out
}

/// Term-by-chunk double loop straight from the Okapi formula.
fn oracle_bm25(texts: &[String], keywords: &[String], k1: f64, b: f64) -> Vec<Option<f64>> {
    let docs: Vec<Vec<String>> = texts.iter().map(|t| oracle_terms(t)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let unique: BTreeSet<&String> = keywords.iter().collect();
    docs.iter()
        .map(|doc| {
            let mut score = None;
            for term in &unique {
                let tf = doc.iter().filter(|t| t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                let len = doc.len() as f64;
                let s = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avgdl));
                *score.get_or_insert(0.0) += s;
            }
            score
        })
        .collect()
}

fn bm25_oracle() -> String {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(SEED);
    let separators = [" ", " ", " ", ", ", ". ", "\n", "-", "; "];
    let mut worst = 0.0f64;
    let mut scored = 0usize;
    for corpus in 0..100 {
        let vocab_size = rng.gen_range(1..=200);
        let mut vocab: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
        vocab.extend(STOPWORDS.iter().take(10).map(|s| s.to_string()));
        let n_chunks = rng.gen_range(1..=50);
        let texts: Vec<String> = (0..n_chunks)
            .map(|_| {
                let len = rng.gen_range(1..=40);
                let mut text = String::new();
                for i in 0..len {
                    if i > 0 {
                        text.push_str(separators.choose(&mut rng).unwrap());
                    }
                    let word = vocab.choose(&mut rng).unwrap();
                    if rng.gen_bool(0.2) {
                        text.push_str(&word.to_uppercase());
                    } else {
                        text.push_str(word);
                    }
                }
                text
            })
            .collect();
        let index = random_index(&mut rng, texts.clone(), 4);
        let params = Bm25Params::default();
        for _ in 0..5 {
            let n_kw = rng.gen_range(1..=8);
            let mut keywords: Vec<String> = (0..n_kw).map(|_| vocab.choose(&mut rng).unwrap().to_lowercase()).collect();
            keywords.retain(|k| !STOPWORDS.contains(&k.as_str()));
            if rng.gen_bool(0.3) {
                keywords.push("unseen".into());
            }
            let got = bm25_scores(&keywords, &index, params);
            let want = oracle_bm25(&texts, &keywords, params.k1, params.b);
            for (i, expected) in want.iter().enumerate() {
                let actual = got.get(&ChunkId(i as u32)).copied();
                match (expected, actual) {
                    (None, None) => {}
                    (Some(e), Some(a)) => {
                        let diff = (e - a).abs();
                        worst = worst.max(diff);
                        assert!(diff <= 1e-9, "corpus {corpus} chunk {i}: {a} vs oracle {e}");
                        scored += 1;
                    }
                    _ => panic!("corpus {corpus} chunk {i}: presence differs ({actual:?} vs {expected:?})"),
                }
            }
        }
    }

    let toy: Vec<String> = ["apple apple pear", "kiwi plum fig", "lime date nut"].map(String::from).to_vec();
    let mut rng = StdRng::seed_from_u64(SEED);
    let index = random_index(&mut rng, toy, 4);
    let toy_score = bm25_scores(&["apple".to_string()], &index, Bm25Params::default())[&ChunkId(0)];
    let expected = (8.0f64 / 3.0).ln() * 4.4 / 3.2;
    assert!((toy_score - expected).abs() < 1e-12 && (toy_score - 1.3486402).abs() < 1e-6, "toy {toy_score}");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    format!("100 corpora, {scored} scored chunks, max |diff| {worst:.1e}, toy {toy_score:.7}, {elapsed:.2?}")
}

// ------------------------------------------------------------- vectors

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn vector_exactness() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 1);
    let mut lists = 0usize;
    for corpus in 0..100 {
        let n = rng.gen_range(1..=40);
        let dims = rng.gen_range(1..=8);
        let mut pool: Vec<Vec<f64>> = Vec::new();
        let vectors: Vec<EmbeddingVector> = (0..n)
            .map(|_| {
                // duplicates force exact score ties
                let v = if !pool.is_empty() && rng.gen_bool(0.3) {
                    pool.choose(&mut rng).unwrap().clone()
                } else {
                    random_vector(&mut rng, dims)
                };
                pool.push(v.clone());
                EmbeddingVector::new(v).unwrap()
            })
            .collect();
        let chunks = (0..n).map(|i| chunk(i, format!("c{i}"))).collect();
        let index = build_index("acceptance", chunks, &vectors, None).unwrap();
        let query = EmbeddingVector::new(if rng.gen_bool(0.2) {
            pool.choose(&mut rng).unwrap().clone()
        } else {
            random_vector(&mut rng, dims)
        })
        .unwrap();

        let mut full: Vec<(ChunkId, f64)> = (0..n)
            .map(|i| (ChunkId(i as u32), cosine_similarity(&query.values, &vectors[i].values).unwrap()))
            .collect();
        full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..=n + 2 {
            let got = vector_scores(&query, &index, k).unwrap();
            let want: Vec<(ChunkId, f64)> = full.iter().take(k).copied().collect();
            assert_eq!(got, want, "corpus {corpus} k {k}");
            lists += 1;
        }

        for v in &vectors {
            let a = &v.values;
            let b = &query.values;
            let ab = cosine_similarity(a, b).unwrap();
            assert!((ab - oracle_cosine(a, b)).abs() <= 1e-9, "oracle");
            assert!((cosine_similarity(a, a).unwrap() - 1.0).abs() <= 1e-9, "identity");
            assert_eq!(ab, cosine_similarity(b, a).unwrap(), "symmetry");
            let c = rng.gen_range(1e-3..1e3);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            assert!((cosine_similarity(&scaled, b).unwrap() - ab).abs() <= 1e-9, "scale invariance");
        }
    }
    let example = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
    assert!((example - 8.0 / 9.0).abs() <= 1e-12, "{example}");
    format!("100 corpora, {lists} top-k lists equal brute force, ([1,2,2],[2,1,2]) = {example:.6}")
}

// -------------------------------------------------------------- fusion

fn random_table(rng: &mut StdRng) -> Vec<Candidate> {
    let n = rng.gen_range(1..=30);
    let mut bm25_pool = vec![0.0];
    let mut cos_pool = vec![];
    (0..n)
        .map(|i| {
            let bm25 = if rng.gen_bool(0.25) {
                *bm25_pool.choose(rng).unwrap()
            } else {
                rng.gen_range(0.0..10.0)
            };
            let cosine = if !cos_pool.is_empty() && rng.gen_bool(0.25) {
                *cos_pool.choose(rng).unwrap()
            } else {
                rng.gen_range(-1.0..1.0)
            };
            bm25_pool.push(bm25);
            cos_pool.push(cosine);
            // sparse, unordered ids like a real candidate table
            Candidate { chunk_id: ChunkId((i * 7 + 3) as u32), bm25, cosine }
        })
        .collect()
}

fn pure_order(table: &[Candidate], score: impl Fn(&Candidate) -> f64) -> Vec<ChunkId> {
    let mut rows: Vec<&Candidate> = table.iter().collect();
    rows.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap().then(a.chunk_id.cmp(&b.chunk_id)));
    rows.into_iter().map(|c| c.chunk_id).collect()
}

fn rank_of(results: &[coursekb::retrieve::RetrievalResult], id: ChunkId) -> usize {
    results.iter().find(|r| r.chunk_id == id).unwrap().rank
}

fn fusion_properties() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 2);
    let fusions = [Fusion::WeightedSum, Fusion::ReciprocalRank { k: DEFAULT_RRF_K }];
    let mut checks = 0usize;
    for table_no in 0..1000 {
        let mut table = random_table(&mut rng);
        let alpha: f64 = if rng.gen_bool(0.1) { [0.0, 0.5, 1.0][rng.gen_range(0..3)] } else { rng.gen() };
        for fusion in fusions {
            let ctx = format!("table {table_no} {fusion:?} alpha {alpha}");
            let out = fuse(&table, alpha, fusion);
            assert_eq!(out.len(), table.len(), "{ctx}");
            let ids: BTreeSet<ChunkId> = out.iter().map(|r| r.chunk_id).collect();
            assert_eq!(ids, table.iter().map(|c| c.chunk_id).collect(), "{ctx}");
            for (i, r) in out.iter().enumerate() {
                assert_eq!(r.rank, i + 1, "{ctx}");
                assert!((0.0..=1.0).contains(&r.fused_score), "{ctx}");
            }
            for w in out.windows(2) {
                let ordered = w[0].fused_score > w[1].fused_score
                    || (w[0].fused_score == w[1].fused_score && w[0].chunk_id < w[1].chunk_id);
                assert!(ordered, "{ctx}");
            }

            assert_eq!(
                fuse(&table, 1.0, fusion).iter().map(|r| r.chunk_id).collect::<Vec<_>>(),
                pure_order(&table, |c| c.bm25),
                "{ctx} alpha=1"
            );
            assert_eq!(
                fuse(&table, 0.0, fusion).iter().map(|r| r.chunk_id).collect::<Vec<_>>(),
                pure_order(&table, |c| c.cosine),
                "{ctx} alpha=0"
            );

            let j = rng.gen_range(0..table.len());
            let before = rank_of(&out, table[j].chunk_id);
            let mut bumped = table.clone();
            bumped[j].bm25 += rng.gen_range(0.0..3.0);
            bumped[j].cosine += rng.gen_range(0.0..0.5);
            let after = rank_of(&fuse(&bumped, alpha, fusion), table[j].chunk_id);
            assert!(after <= before, "{ctx}: monotonicity, rank {before} -> {after}");
            checks += 1;
        }

        let j = rng.gen_range(0..table.len());
        let top_bm25 = table.iter().map(|c| c.bm25).fold(0.0, f64::max);
        let top_cos = table.iter().map(|c| c.cosine).fold(-1.0, f64::max);
        table[j].bm25 = top_bm25 + 1.0;
        table[j].cosine = top_cos + 0.1;
        for fusion in fusions {
            let out = fuse(&table, alpha, fusion);
            assert_eq!(out[0].chunk_id, table[j].chunk_id, "table {table_no} {fusion:?}: dominance");
        }
    }
    format!("1000 tables x 2 fusions: bounds, ranks, order, dominance, {checks} monotone bumps, alpha 0/1 pure orderings")
}

// --------------------------------------------------------------- index

/// Passes through to a [`MemoryStore`] but fails the `fail_at`-th operation.
struct FlakyStore<'a> {
    inner: &'a MemoryStore,
    ops: AtomicUsize,
    fail_at: usize,
}

impl<'a> FlakyStore<'a> {
    fn new(inner: &'a MemoryStore, fail_at: usize) -> Self {
        Self { inner, ops: AtomicUsize::new(0), fail_at }
    }

    fn tick(&self) -> Result<(), StoreError> {
        if self.ops.fetch_add(1, Ordering::SeqCst) == self.fail_at {
            return Err(StoreError::Unavailable("injected".into()));
        }
        Ok(())
    }
}

impl ObjectStore for FlakyStore<'_> {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.tick()?;
        self.inner.put(key, bytes)
    }
    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.tick()?;
        self.inner.get(key)
    }
    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        self.tick()?;
        self.inner.list(prefix)
    }
    fn delete(&self, key: &str) -> Result<(), StoreError> {
        self.tick()?;
        self.inner.delete(key)
    }
}

fn random_texts(rng: &mut StdRng, n: usize) -> Vec<String> {
    let words = ["tree", "split", "gini", "entropy", "prune", "leaf", "node", "depth", "the", "of", "Bagging", "x1"];
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=15);
            (0..len).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn assert_same_index(a: &CourseIndex, b: &CourseIndex, ctx: &str) {
    assert_eq!(a.course_id, b.course_id, "{ctx}");
    assert_eq!(a.chunks, b.chunks, "{ctx}");
    assert_eq!(a.postings, b.postings, "{ctx}");
    assert_eq!(a.doc_lengths, b.doc_lengths, "{ctx}");
    assert!((a.avg_doc_length - b.avg_doc_length).abs() <= 1e-12 * a.avg_doc_length.max(1.0), "{ctx}");
    assert_eq!(a.dims, b.dims, "{ctx}");
    assert_eq!(a.manifest_version, b.manifest_version, "{ctx}");
    assert_eq!(a.created_at, b.created_at, "{ctx}");
    assert_eq!(a.vectors.len(), b.vectors.len(), "{ctx}");
    for (x, y) in a.vectors.iter().zip(&b.vectors) {
        assert!((x - y).abs() <= 1e-7, "{ctx}: {x} vs {y}");
    }
}

fn index_round_trip() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 3);
    for case in 0..50 {
        let n = rng.gen_range(1..=30);
        let dims = rng.gen_range(1..=16);
        let texts = random_texts(&mut rng, n);
        let mut index = random_index(&mut rng, texts, dims);
        let store = MemoryStore::new();
        persist_index(&mut index, "course", &store).unwrap();
        let loaded = load_index("course", &store).unwrap();
        assert_same_index(&index, &loaded, &format!("case {case}"));
    }

    let mut injected = 0usize;
    for case in 0..10 {
        let store = MemoryStore::new();
        let texts = random_texts(&mut rng, 5);
        let mut first = random_index(&mut rng, texts, 8);
        persist_index(&mut first, "course", &store).unwrap();
        let texts = random_texts(&mut rng, 7);
        let second = random_index(&mut rng, texts, 8);
        for fail_at in 0.. {
            let attempt_store = MemoryStore::new();
            for key in store.list("").unwrap() {
                attempt_store.put(&key, &store.get(&key).unwrap()).unwrap();
            }
            let flaky = FlakyStore::new(&attempt_store, fail_at);
            let mut attempt = second.clone();
            let result = persist_index(&mut attempt, "course", &flaky);
            match attempt_store.get(&manifest_key("course")) {
                Ok(_) => {
                    let loaded = load_index("course", &attempt_store)
                        .unwrap_or_else(|e| panic!("case {case} fail_at {fail_at}: manifest left dangling: {e}"));
                    let expected = if result.is_ok() { &attempt } else { &first };
                    assert_same_index(expected, &loaded, &format!("case {case} fail_at {fail_at}"));
                }
                Err(StoreError::NotFound(_)) => {
                    assert!(result.is_err(), "case {case}: success without a manifest");
                    assert!(matches!(load_index("course", &attempt_store), Err(Error::IndexNotFound)));
                }
                Err(e) => panic!("{e}"),
            }
            if result.is_ok() {
                break;
            }
            injected += 1;
        }
    }

    let embedder = LocalEmbedder::new(64);
    let body = std::fs::read_to_string(common::fixtures().join("docs/module3_trees.md")).unwrap();
    let raw_key = format!("{}d1.md", raw_prefix("ds2025"));
    let mut outcomes = [0usize; 2];
    for fail_at in 0.. {
        let store = MemoryStore::new();
        store.put(&raw_key, body.as_bytes()).unwrap();
        let flaky = FlakyStore::new(&store, fail_at);
        let result = index_document(&flaky, &embedder, ChunkParams::default(), "ds2025", "DS2025", "d1", &body);
        let raw_present = store.get(&raw_key).is_ok();
        match &result {
            Ok(_) => assert!(!raw_present, "raw upload kept after indexing"),
            Err(_) => assert!(raw_present, "fail_at {fail_at}: raw upload lost on failure"),
        }
        if store.get(&manifest_key("ds2025")).is_ok() {
            load_index("ds2025", &store).unwrap();
        }
        outcomes[usize::from(result.is_ok())] += 1;
        if result.is_ok() {
            assert!(store.list(&raw_prefix("ds2025")).unwrap().is_empty());
            break;
        }
    }
    format!(
        "50 random round trips; {injected} injected persist failures, none left a dangling manifest; \
         raw upload retained on {} failed and removed on {} successful indexing runs",
        outcomes[0], outcomes[1]
    )
}

// --------------------------------------------------------- transcripts

fn transcript_cleaning() -> String {
    let dir = golden("transcripts");
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().to_str()?.strip_suffix(".json").map(String::from))
        .collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    let residue = Regex::new(r"\d+:\d+|[\[\]]").unwrap();
    for name in &names {
        let read = |ext: &str| std::fs::read_to_string(dir.join(format!("{name}.{ext}"))).unwrap();
        let entries: Vec<TranscriptEntry> = serde_json::from_str(&read("json")).unwrap();
        let got = clean_transcript(&entries, &read("title")).unwrap();
        assert_eq!(got, read("expected.txt"), "golden {name}");
        assert!(!residue.is_match(&got), "golden {name} has residue");
    }

    let fixture = common::fixtures().join("transcripts").join(common::VIDEO_ID);
    let entries: Vec<TranscriptEntry> =
        serde_json::from_str(&std::fs::read_to_string(fixture.join("en.json")).unwrap()).unwrap();
    let fixture_out = clean_transcript(&entries, std::fs::read_to_string(fixture.join("title.txt")).unwrap().trim()).unwrap();
    assert!(!residue.is_match(&fixture_out));

    let mut rng = StdRng::seed_from_u64(SEED + 4);
    let words = ["so", "gradient", "tree", "café", "node", "x", "split", "Week", "one"];
    let noise = ["[Music]", "[Applause]", "[ Laughter ]", "[inaudible]", "00:00", "1:02:03", "12:30.5", "3:2", "]"];
    for case in 0..500 {
        let mut kept = Vec::new();
        let mut entries = Vec::new();
        for e in 0..rng.gen_range(1..=8) {
            let mut parts = Vec::new();
            for _ in 0..rng.gen_range(1..=6) {
                if rng.gen_bool(0.35) {
                    parts.push(noise.choose(&mut rng).unwrap().to_string());
                } else {
                    let w = words.choose(&mut rng).unwrap().to_string();
                    kept.push(w.clone());
                    parts.push(w);
                }
            }
            if rng.gen_bool(0.15) {
                // cue split across caption boundaries
                parts.push("[Mu".into());
                entries.push(TranscriptEntry::new(parts.join(" "), e as f64, 1.0));
                entries.push(TranscriptEntry::new("sic]", e as f64 + 0.5, 0.5));
            } else {
                entries.push(TranscriptEntry::new(parts.join(" "), e as f64, 1.0));
            }
        }
        match clean_transcript(&entries, "Title [HD]") {
            Ok(out) => {
                assert!(!residue.is_match(&out), "case {case}: {out:?}");
                let (title, body) = out.split_once("\n\n").unwrap();
                assert_eq!(title, "Title");
                assert_eq!(body, kept.join(" "), "case {case}");
            }
            Err(Error::EmptyTranscript) => assert!(kept.is_empty(), "case {case}"),
            Err(e) => panic!("case {case}: {e}"),
        }
    }
    format!("{} goldens match, fixture and 500 noisy transcripts have no timestamp or cue residue", names.len())
}

// --------------------------------------------------------------- ROUGE

type Counts = (usize, usize, usize);

/// Hand-counted (overlap, candidate total, reference total) for ROUGE-1,
/// ROUGE-2 and ROUGE-L.
const ROUGE_PAIRS: [(&str, &str, Counts, Counts, Counts); 10] = [
    ("the cat sat on the mat", "the cat lay on the mat", (5, 6, 6), (3, 5, 5), (5, 6, 6)),
    ("the cat", "the dog", (1, 2, 2), (0, 1, 1), (1, 2, 2)),
    ("a b c d", "a c d", (3, 4, 3), (1, 3, 2), (3, 4, 3)),
    ("a b c", "c b a", (3, 3, 3), (0, 2, 2), (1, 3, 3)),
    ("the the the the", "the cat", (1, 4, 2), (0, 3, 1), (1, 4, 2)),
    ("The Cat SAT", "the cat sat", (3, 3, 3), (2, 2, 2), (3, 3, 3)),
    ("x y z", "p q r", (0, 3, 3), (0, 2, 2), (0, 3, 3)),
    ("a b a b a", "b a b", (3, 5, 3), (2, 4, 2), (3, 5, 3)),
    ("one two three four five", "one three five", (3, 5, 3), (0, 4, 2), (3, 5, 3)),
    ("hello", "hello world", (1, 1, 2), (0, 0, 1), (1, 1, 2)),
];

fn check_counts(got: OverlapCounts, want: Counts, score: coursekb::analytics::RougeScore, ctx: &str) {
    let (o, c, r) = want;
    assert_eq!((got.overlap, got.candidate_total, got.reference_total), want, "{ctx}");
    let (p, rec) = if c == 0 || r == 0 { (0.0, 0.0) } else { (o as f64 / c as f64, o as f64 / r as f64) };
    assert_eq!(score.precision, p, "{ctx} precision");
    assert_eq!(score.recall, rec, "{ctx} recall");
    let f1 = if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
    assert_eq!(score.f1, f1, "{ctx} f1");
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn rouge_correctness() -> String {
    for (cand, reference, r1, r2, rl) in ROUGE_PAIRS {
        let ctx = format!("{cand:?} vs {reference:?}");
        check_counts(ngram_overlap(cand, reference, 1).unwrap(), r1, rouge_n(cand, reference, 1).unwrap(), &format!("{ctx} rouge1"));
        check_counts(ngram_overlap(cand, reference, 2).unwrap(), r2, rouge_n(cand, reference, 2).unwrap(), &format!("{ctx} rouge2"));
        check_counts(lcs_overlap(cand, reference).unwrap(), rl, rouge_l(cand, reference).unwrap(), &format!("{ctx} rougeL"));
    }

    let mut rng = StdRng::seed_from_u64(SEED + 5);
    for case in 0..500 {
        let alphabet = rng.gen_range(1..=4u8);
        let seq = |rng: &mut StdRng| -> Vec<u8> { (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..alphabet)).collect() };
        let a = seq(&mut rng);
        let b = seq(&mut rng);
        let want = brute_lcs(&a, &b);
        assert_eq!(lcs_len(&a, &b), want, "case {case}: {a:?} {b:?}");
        let text = |s: &[u8]| s.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" ");
        let counts = lcs_overlap(&text(&a), &text(&b)).unwrap();
        assert_eq!(counts.overlap, want, "case {case}");
        let score = rouge_l(&text(&a), &text(&b)).unwrap();
        assert_eq!(score.precision, want as f64 / a.len() as f64, "case {case}");
        assert_eq!(score.recall, want as f64 / b.len() as f64, "case {case}");
    }
    "10 hand-counted pairs exact for rouge1/rouge2/rougeL; 500 random sequences match the subsequence oracle".into()
}

// ------------------------------------------------------------- prompts

const PROMPT_SHA256: [(PromptMode, &str); 3] = [
    (PromptMode::Restricted, "e4e1e64a9559b0fa2a85c2d48f4831d27cb737ecb77531df2e1bc68e73cf23a2"),
    (PromptMode::Relaxed, "5f8bd46df79747d7fb0a0913808feaa5731da277be38a8ba17bd3ce2cc2d3630"),
    (PromptMode::Medical, "3bc2dd566f1315b11db92244094cf5c2191c3a34216b0dfd46e7164a12cb3b9d"),
];

fn prompt_fidelity() -> String {
    for (mode, digest) in PROMPT_SHA256 {
        let golden_bytes = std::fs::read(golden(&format!("prompts/{mode}.txt"))).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&golden_bytes)), digest, "{mode} golden file");
        let rendered = render_prompt(mode, &["CONTEXT-SENTINEL"], "QUESTION-SENTINEL?").unwrap();
        let stripped = rendered.replace("CONTEXT-SENTINEL\n", "").replace("QUESTION-SENTINEL?\n", "");
        assert_eq!(stripped.as_bytes(), golden_bytes.as_slice(), "{mode} rendered");
    }

    let embedder = LocalEmbedder::default();
    let body = std::fs::read_to_string(common::fixtures().join("docs/module3_trees.md")).unwrap();
    let chunks = chunk_text("d1", &body, ChunkParams::default()).unwrap();
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts).unwrap();
    let index = build_index("DS2025", chunks, &vectors, None).unwrap();

    let llm = MockLlm::default();
    let reply = compose_reply(
        &index,
        &embedder,
        Some(&llm),
        "what is it that they were?",
        PromptMode::Restricted,
        &ChatOptions::default(),
    )
    .unwrap();
    assert!(reply.retrieved.is_empty());
    assert_eq!(reply.answer, REFUSAL);
    assert_eq!(reply.answer, "I don't know.");
    assert_eq!(llm.calls(), 0);

    let reply = compose_reply(&index, &embedder, Some(&llm), "how does pruning work?", PromptMode::Restricted, &ChatOptions::default())
        .unwrap();
    assert!(!reply.retrieved.is_empty());
    assert_eq!(llm.calls(), 1);
    "3 templates match golden checksums; empty restricted retrieval answers \"I don't know.\" with 0 model calls".into()
}

// ------------------------------------------------------------- privacy

fn privacy_suite() -> String {
    let mut table: Vec<(String, String)> = common::endpoints()
        .iter()
        .map(|e| (e.method.to_owned(), e.template.to_owned()))
        .collect();
    table.sort();
    let routes = common::routes_in_source();
    assert_eq!(table, routes, "route table differs from the router");
    let fx = common::private_fixture();
    let checked = common::check_privacy_cycle(&fx);
    let read = common::endpoints().iter().filter(|e| e.access == common::Access::CourseRead).count();
    assert_eq!(checked, read + 1);
    format!("{checked} read endpoints deny, allow after grant, deny after revoke; route table covers all {} routes", routes.len())
}

// ----------------------------------------------------------- analytics

fn analytics_anchor() -> String {
    let db = Db::in_memory().unwrap();
    let owner_id = db
        .register("prof", "prof@example.org", common::PASSWORD, Role::Instructor, Plan::InstructorBasic)
        .unwrap();
    let owner = db.user(owner_id).unwrap();
    let question = |i: usize| QuizQuestion {
        question_text: format!("question {i}"),
        options: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        correct_index: i % 4,
    };
    let questions: Vec<QuizQuestion> = (0..4).map(question).collect();
    let correct: Vec<usize> = questions.iter().map(|q| q.correct_index).collect();
    let answers_scoring = |n_right: usize| -> Vec<usize> {
        correct.iter().enumerate().map(|(i, &c)| if i < n_right { c } else { (c + 1) % 4 }).collect()
    };
    let mut learner_no = 0;
    let mut learner = |db: &Db| {
        learner_no += 1;
        let name = format!("learner{learner_no}");
        db.register(&name, &format!("{name}@example.org"), common::PASSWORD, Role::Learner, Plan::LearnerBasic)
            .unwrap()
    };

    let ds = db.create_course(&owner, "DS2025", Visibility::Private).unwrap();
    let module3 = db.insert_quiz(ds.course_id, "Module 3", &questions).unwrap();
    let module2 = db.insert_quiz(ds.course_id, "Module 2", &questions).unwrap();
    for (best, extra) in [(0, None), (1, Some(0)), (1, None)] {
        let uid = learner(&db);
        db.record_attempt(uid, module3.quiz_id, &answers_scoring(best)).unwrap();
        if let Some(n) = extra {
            db.record_attempt(uid, module3.quiz_id, &answers_scoring(n)).unwrap();
        }
        db.record_attempt(uid, module2.quiz_id, &answers_scoring(4)).unwrap();
    }
    // recovered: 0.25 then 0.75
    let uid = learner(&db);
    db.record_attempt(uid, module3.quiz_id, &answers_scoring(1)).unwrap();
    db.record_attempt(uid, module3.quiz_id, &answers_scoring(3)).unwrap();
    // exactly at the threshold is not weak
    let uid = learner(&db);
    db.record_attempt(uid, module3.quiz_id, &answers_scoring(2)).unwrap();

    let report = db.weak_module_report(ds.course_id, 0.5).unwrap();
    let expected = BTreeMap::from([("Module 2".to_string(), 0), ("Module 3".to_string(), 3)]);
    assert_eq!(report, expected);

    let strong = db.create_course(&owner, "Strong Cohort", Visibility::Public).unwrap();
    let mut quizzes = HashMap::new();
    for label in ["Module 1", "Module 2", "Module 3"] {
        quizzes.insert(label, db.insert_quiz(strong.course_id, label, &questions).unwrap().quiz_id);
    }
    for n_right in [2, 3, 4] {
        let uid = learner(&db);
        for quiz_id in quizzes.values() {
            db.record_attempt(uid, *quiz_id, &answers_scoring(0)).unwrap();
            db.record_attempt(uid, *quiz_id, &answers_scoring(n_right)).unwrap();
        }
    }
    let strong_report = db.weak_module_report(strong.course_id, 0.5).unwrap();
    assert_eq!(strong_report.len(), 3);
    assert!(strong_report.values().all(|&n| n == 0), "{strong_report:?}");
    format!("DS2025 {report:?}; all-strong course {strong_report:?}")
}

// ---------------------------------------------------------- end to end

fn end_to_end() -> String {
    let elapsed = common::happy_path_script();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!("scripted session all 2xx in {elapsed:.2?}")
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("bm25_oracle_equivalence", bm25_oracle),
        ("vector_search_exactness", vector_exactness),
        ("fusion_properties", fusion_properties),
        ("index_round_trip", index_round_trip),
        ("transcript_cleaning", transcript_cleaning),
        ("rouge_correctness", rouge_correctness),
        ("prompt_fidelity", prompt_fidelity),
        ("privacy_suite", privacy_suite),
        ("analytics_anchor", analytics_anchor),
        ("end_to_end_script", end_to_end),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL {name}: {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
