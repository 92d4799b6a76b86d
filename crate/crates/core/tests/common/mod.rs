//! Shared harness for the HTTP-level integration tests: an in-process
//! server on a loopback port, a mock model and a small JSON client.

#![allow(dead_code)]

use coursekb::chunker::{Embedder, LocalEmbedder};
use coursekb::courses::StubGateway;
use coursekb::db::Db;
use coursekb::index::{MemoryStore, ObjectStore};
use coursekb::ingest::FixtureTranscriptProvider;
use coursekb::llm::{ChatRequest, ChatResponse, LlmClient};
use coursekb::service::Platform;
use reqwest::blocking::{multipart, Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const PASSWORD: &str = "correct horse battery";
pub const VIDEO_ID: &str = "Lec03Trees_";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Answers every prompt with a fixed string and counts calls.
#[derive(Debug, Default)]
pub struct MockLlm {
    pub calls: AtomicUsize,
}

impl MockLlm {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for MockLlm {
    fn model_id(&self) -> &str {
        "mock-llm"
    }

    fn chat(&self, request: &ChatRequest) -> coursekb::Result<ChatResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = &request.messages.last().expect("one message").content;
        Ok(ChatResponse {
            content: format!("mock answer ({} prompt chars)", prompt.len()),
        })
    }
}

pub fn platform_with(store: Arc<dyn ObjectStore>, embedder: Arc<dyn Embedder>, llm: Arc<MockLlm>) -> Platform {
    Platform::new(
        Db::in_memory().unwrap(),
        store,
        embedder,
        Some(llm),
        Arc::new(FixtureTranscriptProvider::new(fixtures().join("transcripts"))),
        Arc::new(StubGateway::new()),
    )
}

pub fn platform(llm: Arc<MockLlm>) -> Platform {
    platform_with(Arc::new(MemoryStore::new()), Arc::new(LocalEmbedder::new(384)), llm)
}

/// Serve `platform` on an ephemeral loopback port for the rest of the test
/// process and return the base URL.
pub fn spawn(platform: Platform) -> String {
    let platform = Arc::new(platform);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, coursekb::api::router(platform)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub struct Api {
    pub base: String,
    pub http: Client,
}

#[derive(Debug, Clone)]
pub struct User {
    pub user_id: i64,
    pub token: String,
}

impl Api {
    pub fn new(base: String) -> Self {
        Self {
            base,
            http: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        }
    }

    fn auth(&self, rb: RequestBuilder, token: Option<&str>) -> RequestBuilder {
        match token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    fn finish(rb: RequestBuilder) -> (StatusCode, Value) {
        let resp = rb.send().unwrap();
        let status = resp.status();
        let text = resp.text().unwrap();
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, body)
    }

    pub fn get(&self, path: &str, token: Option<&str>) -> (StatusCode, Value) {
        Self::finish(self.auth(self.http.get(format!("{}{path}", self.base)), token))
    }

    pub fn post(&self, path: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
        Self::finish(self.auth(self.http.post(format!("{}{path}", self.base)).json(&body), token))
    }

    pub fn delete(&self, path: &str, token: Option<&str>) -> (StatusCode, Value) {
        Self::finish(self.auth(self.http.delete(format!("{}{path}", self.base)), token))
    }

    pub fn upload(&self, course_id: i64, token: &str, filename: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
        let form = multipart::Form::new().part("file", multipart::Part::bytes(bytes).file_name(filename.to_owned()));
        Self::finish(
            self.http
                .post(format!("{}/courses/{course_id}/documents", self.base))
                .bearer_auth(token)
                .multipart(form),
        )
    }

    /// Register, pay and log in.
    pub fn signup(&self, username: &str, plan: &str) -> User {
        let role = if plan.starts_with("instructor") { "instructor" } else { "learner" };
        let (status, body) = self.post(
            "/auth/register",
            None,
            json!({"username": username, "email": format!("{username}@example.org"),
                   "password": PASSWORD, "role": role, "plan": plan}),
        );
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let user_id = body["user_id"].as_i64().unwrap();
        let (status, body) = self.post(
            "/auth/pay",
            None,
            json!({"username": username, "password": PASSWORD, "plan": plan}),
        );
        assert_eq!(status, StatusCode::OK, "{body}");
        let (status, body) = self.post("/auth/login", None, json!({"username": username, "password": PASSWORD}));
        assert_eq!(status, StatusCode::OK, "{body}");
        User {
            user_id,
            token: body["token"].as_str().unwrap().to_owned(),
        }
    }

    pub fn create_course(&self, owner: &User, title: &str, visibility: &str) -> i64 {
        let (status, body) = self.post(
            "/courses",
            Some(&owner.token),
            json!({"title": title, "visibility": visibility}),
        );
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["course_id"].as_i64().unwrap()
    }

    /// Poll a job until it leaves the queue; returns the final job body.
    pub fn wait_job(&self, job_id: i64, token: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let (status, body) = self.get(&format!("/jobs/{job_id}"), Some(token));
            assert_eq!(status, StatusCode::OK, "{body}");
            match body["status"].as_str() {
                Some("done") | Some("failed") => return body,
                _ if Instant::now() > deadline => panic!("job {job_id} did not finish: {body}"),
                _ => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    /// Upload the fixture document and transcript and wait for both jobs.
    pub fn seed_course(&self, owner: &User, course_id: i64) {
        let doc = std::fs::read(fixtures().join("docs/module3_trees.md")).unwrap();
        let (status, body) = self.upload(course_id, &owner.token, "module3_trees.md", doc);
        assert_eq!(status, StatusCode::ACCEPTED, "{body}");
        let job = self.wait_job(body["job_id"].as_i64().unwrap(), &owner.token);
        assert_eq!(job["status"], "done", "{job}");

        let (status, body) = self.post(
            &format!("/courses/{course_id}/youtube"),
            Some(&owner.token),
            json!({"url": format!("https://www.youtube.com/watch?v={VIDEO_ID}")}),
        );
        assert_eq!(status, StatusCode::ACCEPTED, "{body}");
        let job = self.wait_job(body["job_id"].as_i64().unwrap(), &owner.token);
        assert_eq!(job["status"], "done", "{job}");
    }
}

/// True when `body` has exactly the error envelope fields.
pub fn is_api_error(body: &Value) -> bool {
    body.as_object().is_some_and(|o| {
        o.len() == 3 && o["http_status"].is_u64() && o["code"].is_string() && o["message"].is_string()
    })
}

/// Who may call a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// No token needed.
    Open,
    /// Any signed-in user; acts on the caller's own account.
    Account,
    /// Reads course content: owner, grantee, or anyone for a public course.
    CourseRead,
    /// Course owner only.
    OwnerOnly,
}

/// Concrete ids substituted into route templates.
#[derive(Debug, Clone, Copy)]
pub struct Ids {
    pub course: i64,
    pub user: i64,
    pub quiz: i64,
    pub job: i64,
}

pub struct Endpoint {
    pub method: &'static str,
    pub template: &'static str,
    pub access: Access,
    body: fn(&Ids) -> Option<Value>,
}

impl Endpoint {
    pub fn path(&self, ids: &Ids) -> String {
        let path = self.template.replace("{user_id}", &ids.user.to_string());
        let id = if path.starts_with("/quizzes/") {
            ids.quiz
        } else if path.starts_with("/jobs/") {
            ids.job
        } else {
            ids.course
        };
        path.replace("{id}", &id.to_string())
    }

    pub fn call(&self, api: &Api, ids: &Ids, token: Option<&str>) -> (StatusCode, Value) {
        let url = format!("{}{}", api.base, self.path(ids));
        let mut rb = match self.method {
            "GET" => api.http.get(url),
            "POST" => api.http.post(url),
            "DELETE" => api.http.delete(url),
            other => panic!("unexpected method {other}"),
        };
        if let Some(t) = token {
            rb = rb.bearer_auth(t);
        }
        if self.template.ends_with("/documents") && self.method == "POST" {
            let doc = b"Pruning cuts branches.\n\nForests average trees.".to_vec();
            rb = rb.multipart(multipart::Form::new().part("file", multipart::Part::bytes(doc).file_name("n.txt")));
        } else if let Some(body) = (self.body)(ids) {
            rb = rb.json(&body);
        }
        Api::finish(rb)
    }
}

fn no_body(_: &Ids) -> Option<Value> {
    None
}

/// Every route the server exposes, with the body a valid call needs.
pub fn endpoints() -> Vec<Endpoint> {
    use Access::*;
    let e = |method, template, access, body| Endpoint {
        method,
        template,
        access,
        body,
    };
    vec![
        e("POST", "/auth/register", Open, |_| {
            Some(json!({"username": "sweeper", "email": "s@example.org", "password": PASSWORD,
                        "role": "learner", "plan": "learner_basic"}))
        }),
        e("POST", "/auth/pay", Open, |_| {
            Some(json!({"username": "sweeper", "password": PASSWORD, "plan": "learner_basic"}))
        }),
        e("POST", "/auth/login", Open, |_| Some(json!({"username": "sweeper", "password": PASSWORD}))),
        e("POST", "/auth/password-reset", Open, |_| Some(json!({"username": "sweeper"}))),
        e("POST", "/auth/password-reset/confirm", Open, |_| {
            Some(json!({"token": "0000", "new_password": "whatever123"}))
        }),
        e("POST", "/auth/logout", Account, no_body),
        e("GET", "/auth/me", Account, no_body),
        e("POST", "/courses", Account, |_| Some(json!({"title": "Sweep", "visibility": "public"}))),
        e("GET", "/courses", Account, no_body),
        e("GET", "/courses/{id}", CourseRead, no_body),
        e("POST", "/courses/{id}/grants", OwnerOnly, |ids| Some(json!({"user_id": ids.user}))),
        e("DELETE", "/courses/{id}/grants/{user_id}", OwnerOnly, no_body),
        e("POST", "/courses/{id}/documents", OwnerOnly, no_body),
        e("GET", "/courses/{id}/documents", CourseRead, no_body),
        e("POST", "/courses/{id}/youtube", OwnerOnly, |_| {
            Some(json!({"url": format!("https://youtu.be/{VIDEO_ID}")}))
        }),
        e("GET", "/jobs/{id}", OwnerOnly, no_body),
        e("POST", "/courses/{id}/retrieve", CourseRead, |_| Some(json!({"question": "pruning trees"}))),
        e("POST", "/courses/{id}/chat", CourseRead, |_| {
            Some(json!({"question": "what does pruning remove?", "mode": "relaxed"}))
        }),
        e("GET", "/courses/{id}/turns", CourseRead, no_body),
        e("GET", "/courses/{id}/analytics/weak-modules", OwnerOnly, no_body),
        e("GET", "/courses/{id}/analytics/time", OwnerOnly, no_body),
        e("POST", "/courses/{id}/quizzes", OwnerOnly, |_| {
            Some(json!({"module_label": "Module 3", "n_questions": 1}))
        }),
        e("GET", "/quizzes/{id}", CourseRead, no_body),
        e("POST", "/quizzes/{id}/attempts", CourseRead, |_| Some(json!({"answers": [0]}))),
    ]
}

/// `(METHOD, template)` for every route registered in the router source.
pub fn routes_in_source() -> Vec<(String, String)> {
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/api.rs")).unwrap();
    let route = regex::Regex::new(r#"\.route\("([^"]+)",\s*([^\n]+)\)"#).unwrap();
    let method = regex::Regex::new(r"\b(get|post|delete|put|patch)\(").unwrap();
    let mut out = Vec::new();
    for cap in route.captures_iter(&src) {
        for m in method.captures_iter(&cap[2]) {
            out.push((m[1].to_ascii_uppercase(), cap[1].to_owned()));
        }
    }
    out.sort();
    out
}

/// A private course with an index, one quiz and one finished job, plus a
/// learner without a grant.
pub struct PrivateFixture {
    pub api: Api,
    pub owner: User,
    pub learner: User,
    pub ids: Ids,
}

pub fn private_fixture() -> PrivateFixture {
    let api = Api::new(spawn(platform(Arc::new(MockLlm::default()))));
    let owner = api.signup("owner", "instructor_basic");
    let learner = api.signup("learner", "learner_basic");
    let course = api.create_course(&owner, "Private Trees", "private");
    let doc = std::fs::read(fixtures().join("docs/module3_trees.md")).unwrap();
    let (_, body) = api.upload(course, &owner.token, "module3_trees.md", doc);
    let job = body["job_id"].as_i64().unwrap();
    assert_eq!(api.wait_job(job, &owner.token)["status"], "done");
    let (status, quiz) = api.post(
        &format!("/courses/{course}/quizzes"),
        Some(&owner.token),
        json!({"module_label": "Module 3", "n_questions": 1}),
    );
    assert_eq!(status, StatusCode::CREATED, "{quiz}");
    let ids = Ids {
        course,
        user: learner.user_id,
        quiz: quiz["quiz_id"].as_i64().unwrap(),
        job,
    };
    PrivateFixture { api, owner, learner, ids }
}

/// Deny, grant, allow, revoke, deny for every course-read endpoint as the
/// fixture's learner. Returns the number of endpoints exercised.
pub fn check_privacy_cycle(fx: &PrivateFixture) -> usize {
    let read: Vec<Endpoint> = endpoints().into_iter().filter(|e| e.access == Access::CourseRead).collect();
    let learner = Some(fx.learner.token.as_str());
    let denied = |phase: &str| {
        for e in &read {
            let (status, body) = e.call(&fx.api, &fx.ids, learner);
            assert_eq!(status, StatusCode::FORBIDDEN, "{phase}: {} {} -> {body}", e.method, e.template);
            assert_eq!(body["code"], "access_denied", "{phase}: {} {}", e.method, e.template);
        }
        let (_, listed) = fx.api.get("/courses", learner);
        assert!(
            listed.as_array().unwrap().iter().all(|c| c["course_id"] != fx.ids.course),
            "{phase}: private course listed"
        );
    };

    denied("before grant");
    let (status, body) = fx.api.post(
        &format!("/courses/{}/grants", fx.ids.course),
        Some(&fx.owner.token),
        json!({"user_id": fx.learner.user_id}),
    );
    assert_eq!(status, StatusCode::CREATED, "{body}");
    for e in &read {
        let (status, body) = e.call(&fx.api, &fx.ids, learner);
        assert!(status.is_success(), "after grant: {} {} -> {status} {body}", e.method, e.template);
    }
    let (_, listed) = fx.api.get("/courses", learner);
    assert!(listed.as_array().unwrap().iter().any(|c| c["course_id"] == fx.ids.course));

    let (status, _) = fx.api.delete(
        &format!("/courses/{}/grants/{}", fx.ids.course, fx.learner.user_id),
        Some(&fx.owner.token),
    );
    assert_eq!(status, StatusCode::NO_CONTENT);
    denied("after revoke");
    read.len() + 1
}

/// Register, pay, log in, create a course, upload the fixture document and
/// transcript, chat, take a quiz and pull both reports. Every step must
/// answer 2xx. Returns the wall time.
pub fn happy_path_script() -> Duration {
    let started = Instant::now();
    let llm = Arc::new(MockLlm::default());
    let api = Api::new(spawn(platform(llm.clone())));

    let teacher = api.signup("teacher", "instructor_basic");
    let course = api.create_course(&teacher, "DS2025", "private");
    api.seed_course(&teacher, course);

    let (status, docs) = api.get(&format!("/courses/{course}/documents"), Some(&teacher.token));
    assert_eq!(status, StatusCode::OK);
    let docs = docs.as_array().unwrap();
    assert_eq!(docs.len(), 2);
    assert!(docs.iter().all(|d| d["indexed"] == true && d["body_retained"] == false));

    let (status, reply) = api.post(
        &format!("/courses/{course}/chat"),
        Some(&teacher.token),
        json!({"question": "how does pruning reduce overfitting?", "mode": "restricted"}),
    );
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert!(reply["answer"].as_str().unwrap().starts_with("mock answer"));
    assert!(!reply["context_chunk_ids"].as_array().unwrap().is_empty());
    assert_eq!(llm.calls(), 1);

    let (status, quiz) = api.post(
        &format!("/courses/{course}/quizzes"),
        Some(&teacher.token),
        json!({"module_label": "Module 3", "n_questions": 2}),
    );
    assert_eq!(status, StatusCode::CREATED, "{quiz}");
    let quiz_id = quiz["quiz_id"].as_i64().unwrap();

    let student = api.signup("student", "learner_basic");
    let (status, _) = api.post(
        &format!("/courses/{course}/grants"),
        Some(&teacher.token),
        json!({"user_id": student.user_id}),
    );
    assert_eq!(status, StatusCode::CREATED);
    let (status, shown) = api.get(&format!("/quizzes/{quiz_id}"), Some(&student.token));
    assert_eq!(status, StatusCode::OK);
    assert!(shown["questions"][0].get("correct_index").is_none(), "{shown}");
    let wrong: Vec<u64> = quiz["questions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|q| (q["correct_index"].as_u64().unwrap() + 1) % 4)
        .collect();
    let (status, attempt) = api.post(
        &format!("/quizzes/{quiz_id}/attempts"),
        Some(&student.token),
        json!({"answers": wrong}),
    );
    assert_eq!(status, StatusCode::CREATED, "{attempt}");
    assert_eq!(attempt["score"], 0.0);

    let (status, report) = api.get(&format!("/courses/{course}/analytics/weak-modules"), Some(&teacher.token));
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["modules"], json!({"Module 3": 1}));
    let (status, csv) = api.get(
        &format!("/courses/{course}/analytics/weak-modules?threshold=0.5&format=csv"),
        Some(&teacher.token),
    );
    assert_eq!(status, StatusCode::OK);
    assert_eq!(csv.as_str().unwrap(), "module_label,weak_user_count\nModule 3,1\n");

    let (status, time) = api.get(&format!("/courses/{course}/analytics/time"), Some(&teacher.token));
    assert_eq!(status, StatusCode::OK, "{time}");
    assert_eq!(time["course_id"], course);
    assert!(time["avg_seconds"].as_f64().unwrap() >= 0.0);

    started.elapsed()
}
