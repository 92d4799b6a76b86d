mod common;

use common::{Api, MockLlm};
use coursekb::chunker::{Embedder, EmbeddingVector, LocalEmbedder};
use coursekb::courses::{Plan, Role, Visibility};
use coursekb::index::{load_index, MemoryStore};
use coursekb::ingest::DocFormat;
use reqwest::StatusCode;
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Local embedder that records how many batch embeds overlap.
#[derive(Default)]
struct SlowEmbedder {
    inner: LocalEmbedder,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl Embedder for SlowEmbedder {
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    fn embed(&self, text: &str) -> coursekb::Result<EmbeddingVector> {
        self.inner.embed(text)
    }

    fn embed_batch(&self, texts: &[&str]) -> coursekb::Result<Vec<EmbeddingVector>> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(40));
        let out = texts.iter().map(|t| self.inner.embed(t)).collect();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[test]
fn builds_for_one_course_never_overlap() {
    let embedder = Arc::new(SlowEmbedder::default());
    let store = Arc::new(MemoryStore::new());
    let platform = Arc::new(common::platform_with(store.clone(), embedder.clone(), Arc::new(MockLlm::default())));
    let db = &platform.db;
    let owner_id = db
        .register("owner", "o@example.org", common::PASSWORD, Role::Instructor, Plan::InstructorBasic)
        .unwrap();
    db.process_payment(platform.gateway.as_ref(), owner_id, Plan::InstructorBasic).unwrap();
    let owner = db.user(owner_id).unwrap();
    let course = db.create_course(&owner, "Busy Course", Visibility::Private).unwrap();

    let jobs: Vec<i64> = (0..6)
        .map(|i| {
            let body = format!("Document {i} talks about topic{i}.\n\nA second paragraph for doc {i}.");
            platform
                .submit_upload(&owner, course.course_id, &format!("doc{i}.txt"), body.as_bytes(), DocFormat::Txt)
                .unwrap()
                .job_id
        })
        .collect();
    let workers: Vec<_> = jobs
        .iter()
        .map(|&job| {
            let p = platform.clone();
            std::thread::spawn(move || p.run_job(job).unwrap())
        })
        .collect();
    let finished: Vec<_> = workers.into_iter().map(|w| w.join().unwrap()).collect();

    assert_eq!(embedder.max_in_flight.load(Ordering::SeqCst), 1);
    let versions: BTreeSet<u64> = finished.iter().map(|j| j.manifest_version.unwrap()).collect();
    assert_eq!(versions, (1..=6).collect());
    let index = load_index(&course.slug, store.as_ref()).unwrap();
    assert_eq!(index.manifest_version, 6);
    assert_eq!(index.n_chunks(), 12);
    let docs: BTreeSet<&str> = index.chunks.iter().map(|c| c.doc_id.as_str()).collect();
    assert_eq!(docs.len(), 6);
}

#[test]
fn rapid_uploads_over_http_all_land() {
    let api = Api::new(common::spawn(common::platform(Arc::new(MockLlm::default()))));
    let owner = api.signup("owner", "instructor_basic");
    let course = api.create_course(&owner, "Rapid", "public");
    let jobs: Vec<i64> = (0..5)
        .map(|i| {
            let (status, body) = api.upload(course, &owner.token, &format!("n{i}.md"), format!("# Note {i}\n\nterm{i} body").into_bytes());
            assert_eq!(status, StatusCode::ACCEPTED, "{body}");
            assert_eq!(body["status"], "queued");
            body["job_id"].as_i64().unwrap()
        })
        .collect();
    let mut versions = BTreeSet::new();
    for job in jobs {
        let done = api.wait_job(job, &owner.token);
        assert_eq!(done["status"], "done", "{done}");
        versions.insert(done["manifest_version"].as_u64().unwrap());
    }
    assert_eq!(versions, (1..=5).collect());
    let (_, docs) = api.get(&format!("/courses/{course}/documents"), Some(&owner.token));
    assert!(docs.as_array().unwrap().iter().all(|d| d["indexed"] == true));
}
