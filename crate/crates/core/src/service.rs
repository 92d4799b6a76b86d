//! The platform facade: ties accounts, ingestion, indexing, chat and
//! analytics together with the access rules. The HTTP layer and the CLI
//! both drive this type.

use crate::analytics::{generate_questions, Quiz, QuizAttempt};
use crate::chat::{compose_reply, ChatOptions, ChatTurn, PromptMode, TurnFilter};
use crate::chunker::{chunk_text, Chunk, ChunkParams, Embedder, EmbeddingVector};
use crate::courses::{Course, PaymentGateway, UserAccount};
use crate::db::Db;
use crate::error::{Error, Result};
use crate::index::{build_index, finalize_upload, load_index, persist_index, raw_prefix, CourseIndex, ObjectStore};
use crate::ingest::{clean_transcript, fetch_transcript, parse_upload, parse_video_id, DocFormat, Origin, TranscriptProvider};
use crate::llm::LlmClient;
use crate::retrieve::{build_query, hybrid_retrieve, RetrievalResult};
use chrono::{DateTime, Utc};
use rand::RngCore;
use rusqlite::{params, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

crate::courses::string_enum!(JobStatus {
    Queued => "queued",
    Building => "building",
    Done => "done",
    Failed => "failed",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: i64,
    pub course_id: i64,
    pub doc_id: String,
    pub status: JobStatus,
    /// Set once the job is done.
    pub manifest_version: Option<u64>,
    /// Error code when the job failed.
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Document metadata; the body is dropped once the document is indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentInfo {
    pub doc_id: String,
    pub course_id: i64,
    pub title: String,
    pub origin: Origin,
    pub origin_ref: String,
    pub format: String,
    pub body_retained: bool,
    pub indexed: bool,
    pub ingested_at: DateTime<Utc>,
}

/// A retrieved chunk with its scores, as shown to callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    #[serde(flatten)]
    pub result: RetrievalResult,
    pub doc_id: String,
    pub text: String,
}

/// Receives password-reset tokens for delivery to the account holder.
pub trait ResetNotifier: Send + Sync {
    fn send_reset(&self, user: &UserAccount, token: &str);
}

/// Drops reset tokens; used when no mail transport is configured.
#[derive(Debug, Default)]
pub struct NoMailTransport;

impl ResetNotifier for NoMailTransport {
    fn send_reset(&self, user: &UserAccount, _token: &str) {
        tracing::info!(user_id = user.user_id, "password reset issued; no mail transport configured");
    }
}

pub struct Platform {
    pub db: Db,
    pub store: Arc<dyn ObjectStore>,
    pub embedder: Arc<dyn Embedder>,
    pub llm: Option<Arc<dyn LlmClient>>,
    pub transcripts: Arc<dyn TranscriptProvider>,
    pub gateway: Arc<dyn PaymentGateway>,
    pub notifier: Arc<dyn ResetNotifier>,
    pub chunk_params: ChunkParams,
    pub chat: ChatOptions,
    indices: RwLock<HashMap<i64, Arc<CourseIndex>>>,
    build_locks: Mutex<HashMap<i64, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("chunk_params", &self.chunk_params)
            .field("chat", &self.chat)
            .finish_non_exhaustive()
    }
}

fn new_doc_id() -> String {
    let mut raw = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut raw);
    format!("d{}", hex::encode(raw))
}

impl Platform {
    pub fn new(
        db: Db,
        store: Arc<dyn ObjectStore>,
        embedder: Arc<dyn Embedder>,
        llm: Option<Arc<dyn LlmClient>>,
        transcripts: Arc<dyn TranscriptProvider>,
        gateway: Arc<dyn PaymentGateway>,
    ) -> Self {
        Self {
            db,
            store,
            embedder,
            llm,
            transcripts,
            gateway,
            notifier: Arc::new(NoMailTransport),
            chunk_params: ChunkParams::default(),
            chat: ChatOptions::default(),
            indices: RwLock::new(HashMap::new()),
            build_locks: Mutex::new(HashMap::new()),
        }
    }

    fn llm(&self) -> Option<&dyn LlmClient> {
        self.llm.as_deref()
    }

    // ---- accounts -------------------------------------------------------

    /// Start a password reset; unknown usernames are silently ignored.
    pub fn request_password_reset(&self, username: &str) -> Result<()> {
        if let Some((user, token)) = self.db.request_password_reset(username)? {
            self.notifier.send_reset(&user, &token);
        }
        Ok(())
    }

    // ---- ingestion ------------------------------------------------------

    /// Store an uploaded file and queue its indexing job.
    pub fn submit_upload(&self, user: &UserAccount, course_id: i64, filename: &str, bytes: &[u8], format: DocFormat) -> Result<Job> {
        let course = self.db.owned_course(user, course_id)?;
        let body = parse_upload(bytes, format)?;
        let title = filename.trim();
        let title = if title.is_empty() { "upload" } else { title };
        self.submit_document(&course, title, Origin::Upload, title, format.extension(), bytes, &body)
    }

    /// Fetch and clean a video transcript, store it and queue its indexing
    /// job.
    pub fn submit_youtube(&self, user: &UserAccount, course_id: i64, url: &str, preferred_langs: &[String]) -> Result<Job> {
        let course = self.db.owned_course(user, course_id)?;
        let video_id = parse_video_id(url)?;
        let langs: Vec<String> = if preferred_langs.is_empty() { vec!["en".into()] } else { preferred_langs.to_vec() };
        let (entries, title) = fetch_transcript(self.transcripts.as_ref(), &video_id, &langs)?;
        let body = clean_transcript(&entries, &title)?;
        self.submit_document(&course, &title, Origin::Youtube, url.trim(), "txt", body.as_bytes(), &body)
    }

    #[allow(clippy::too_many_arguments)]
    fn submit_document(
        &self,
        course: &Course,
        title: &str,
        origin: Origin,
        origin_ref: &str,
        extension: &str,
        raw: &[u8],
        body: &str,
    ) -> Result<Job> {
        let doc_id = new_doc_id();
        self.store.put(&format!("{}{doc_id}.{extension}", raw_prefix(&course.slug)), raw)?;
        let now = Utc::now();
        let conn = self.db.conn();
        conn.execute(
            "INSERT INTO documents (doc_id, course_id, title, origin, origin_ref, format, body, body_retained, indexed, ingested_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, 1, 0, ?8)",
            params![doc_id, course.course_id, title, origin.as_str(), origin_ref, extension, body, now],
        )?;
        conn.execute(
            "INSERT INTO jobs (course_id, doc_id, status, created_at, updated_at) VALUES (?1, ?2, 'queued', ?3, ?3)",
            params![course.course_id, doc_id, now],
        )?;
        let job_id = conn.last_insert_rowid();
        drop(conn);
        self.db.job(job_id)
    }

    fn build_lock(&self, course_id: i64) -> Arc<Mutex<()>> {
        let mut locks = self.build_locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(course_id).or_default().clone()
    }

    /// Run a queued job to completion. Jobs of one course run one at a time;
    /// each merges its document into the latest persisted index.
    pub fn run_job(&self, job_id: i64) -> Result<Job> {
        let job = self.db.job(job_id)?;
        if job.status != JobStatus::Queued {
            return Ok(job);
        }
        let lock = self.build_lock(job.course_id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        self.db.set_job(job_id, JobStatus::Building, None, None)?;
        match self.build_for_document(job.course_id, &job.doc_id) {
            Ok(version) => self.db.set_job(job_id, JobStatus::Done, Some(version), None),
            Err(e) => {
                tracing::warn!(job_id, error = %e, "index build failed");
                self.db.set_job(job_id, JobStatus::Failed, None, Some(e.code()))
            }
        }
    }

    fn build_for_document(&self, course_id: i64, doc_id: &str) -> Result<u64> {
        let course = self.db.course(course_id)?;
        let body: Option<String> = self
            .db
            .conn()
            .query_row("SELECT body FROM documents WHERE doc_id = ?1", [doc_id], |r| r.get(0))
            .optional()?
            .flatten();
        let body = body.ok_or_else(|| Error::Internal(format!("document {doc_id} has no retained body")))?;

        let index = index_document(
            self.store.as_ref(),
            self.embedder.as_ref(),
            self.chunk_params,
            &course.slug,
            &course.course_id.to_string(),
            doc_id,
            &body,
        )?;
        self.db.record_indexed(course_id, doc_id, &index)?;
        let version = index.manifest_version;
        self.indices
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(course_id, Arc::new(index));
        Ok(version)
    }

    /// The course index, from cache or the object store.
    pub fn index(&self, course: &Course) -> Result<Arc<CourseIndex>> {
        if let Some(index) = self.indices.read().unwrap_or_else(|p| p.into_inner()).get(&course.course_id) {
            return Ok(index.clone());
        }
        let index = Arc::new(load_index(&course.slug, self.store.as_ref())?);
        self.indices
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(course.course_id, index.clone());
        Ok(index)
    }

    pub fn documents(&self, user: &UserAccount, course_id: i64) -> Result<Vec<DocumentInfo>> {
        self.db.readable_course(user, course_id)?;
        self.db.documents(course_id)
    }

    /// A job, visible to the owner of its course.
    pub fn job(&self, user: &UserAccount, job_id: i64) -> Result<Job> {
        let job = self.db.job(job_id)?;
        self.db.owned_course(user, job.course_id)?;
        Ok(job)
    }

    // ---- retrieval and chat ---------------------------------------------

    /// Ranked context for a question without calling a model.
    pub fn retrieve(&self, user: &UserAccount, course_id: i64, question: &str, k: Option<usize>, alpha: Option<f64>) -> Result<Vec<RankedChunk>> {
        let course = self.db.readable_course(user, course_id)?;
        self.retrieve_in(&course, question, k, alpha)
    }

    /// [`Platform::retrieve`] without the access check.
    pub fn retrieve_in(&self, course: &Course, question: &str, k: Option<usize>, alpha: Option<f64>) -> Result<Vec<RankedChunk>> {
        let index = self.index(course)?;
        let mut config = self.chat.retrieval;
        config.k = k.unwrap_or(config.k);
        config.alpha = alpha.unwrap_or(config.alpha);
        let keyword_llm = self.llm().filter(|_| self.chat.llm_keywords);
        let query = build_query(question, &index, self.embedder.as_ref(), keyword_llm, config.max_keywords)?;
        Ok(hybrid_retrieve(&query, &index, &config)?
            .into_iter()
            .map(|result| {
                let chunk = &index.chunks[result.chunk_id.0 as usize];
                RankedChunk {
                    doc_id: chunk.doc_id.clone(),
                    text: chunk.text.clone(),
                    result,
                }
            })
            .collect())
    }

    /// Answer a question and record the turn. A failed model call is still
    /// recorded, with its error code, before the error is returned.
    pub fn answer(&self, user: &UserAccount, course_id: i64, question: &str, mode: PromptMode, k: Option<usize>) -> Result<ChatTurn> {
        let course = self.db.readable_course(user, course_id)?;
        let index = self.index(&course)?;
        let mut options = self.chat;
        if let Some(k) = k {
            options.retrieval.k = k;
        }
        let reply = compose_reply(&index, self.embedder.as_ref(), self.llm(), question, mode, &options)?;
        let turn = self.db.insert_turn(&ChatTurn {
            turn_id: 0,
            user_id: user.user_id,
            course_id,
            mode,
            question: question.to_owned(),
            context_chunk_ids: reply.retrieved.iter().map(|r| r.chunk_id).collect(),
            rendered_prompt: reply.rendered_prompt,
            answer: reply.answer,
            model_id: reply.model_id,
            created_at: Utc::now(),
            latency_ms: reply.latency_ms,
            error: reply.error.as_ref().map(|e| e.code().to_owned()),
        })?;
        self.db.touch_session(user.user_id, course_id, turn.created_at)?;
        match reply.error {
            Some(e) => Err(e),
            None => Ok(turn),
        }
    }

    /// Owners see every turn of the course; other readers only their own.
    pub fn list_turns(&self, user: &UserAccount, course_id: i64, filter: &TurnFilter) -> Result<Vec<ChatTurn>> {
        let course = self.db.readable_course(user, course_id)?;
        if course.owner_id == user.user_id {
            return self.db.turns(course_id, filter);
        }
        match filter.user_id {
            Some(other) if other != user.user_id => Err(Error::AccessDenied),
            _ => self.db.turns(
                course_id,
                &TurnFilter {
                    user_id: Some(user.user_id),
                    ..filter.clone()
                },
            ),
        }
    }

    // ---- analytics ------------------------------------------------------

    pub fn create_quiz(&self, user: &UserAccount, course_id: i64, module_label: &str, n_questions: usize, use_llm: bool) -> Result<Quiz> {
        let course = self.db.owned_course(user, course_id)?;
        let index = self.index(&course)?;
        let llm = self.llm().filter(|_| use_llm);
        let questions = generate_questions(&index, module_label, n_questions, llm)?;
        self.db.insert_quiz(course_id, module_label, &questions)
    }

    /// A quiz of a readable course. Non-owners do not see the answers.
    pub fn quiz(&self, user: &UserAccount, quiz_id: i64) -> Result<QuizView> {
        let quiz = self.db.quiz(quiz_id)?;
        let course = self.db.readable_course(user, quiz.course_id)?;
        Ok(QuizView::new(quiz, course.owner_id == user.user_id))
    }

    pub fn submit_attempt(&self, user: &UserAccount, quiz_id: i64, answers: &[usize]) -> Result<QuizAttempt> {
        let quiz = self.db.quiz(quiz_id)?;
        self.db.readable_course(user, quiz.course_id)?;
        let attempt = self.db.record_attempt(user.user_id, quiz_id, answers)?;
        self.db.touch_session(user.user_id, quiz.course_id, attempt.completed_at)?;
        Ok(attempt)
    }

    pub fn weak_modules(&self, user: &UserAccount, course_id: i64, threshold: f64) -> Result<std::collections::BTreeMap<String, usize>> {
        self.db.owned_course(user, course_id)?;
        self.db.weak_module_report(course_id, threshold)
    }

    pub fn time_spent(&self, user: &UserAccount, course_id: i64) -> Result<f64> {
        self.db.owned_course(user, course_id)?;
        self.db.avg_time_spent(course_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub question_text: String,
    pub options: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizView {
    pub quiz_id: i64,
    pub course_id: i64,
    pub module_label: String,
    pub questions: Vec<QuestionView>,
    pub created_at: DateTime<Utc>,
}

impl QuizView {
    pub fn new(quiz: Quiz, with_answers: bool) -> Self {
        Self {
            quiz_id: quiz.quiz_id,
            course_id: quiz.course_id,
            module_label: quiz.module_label,
            questions: quiz
                .questions
                .into_iter()
                .map(|q| QuestionView {
                    question_text: q.question_text,
                    options: q.options,
                    correct_index: with_answers.then_some(q.correct_index),
                })
                .collect(),
            created_at: quiz.created_at,
        }
    }
}

/// Merge one document into the course's persisted index (replacing any
/// earlier chunks of the same `doc_id`), persist the result and delete the
/// document's raw upload.
pub fn index_document(
    store: &dyn ObjectStore,
    embedder: &dyn Embedder,
    params: ChunkParams,
    course_slug: &str,
    course_key: &str,
    doc_id: &str,
    body: &str,
) -> Result<CourseIndex> {
    let new_chunks = chunk_text(doc_id, body, params)?;
    let texts: Vec<&str> = new_chunks.iter().map(|c| c.text.as_str()).collect();
    let new_vectors = embedder.embed_batch(&texts)?;

    let previous = match load_index(course_slug, store) {
        Ok(index) => Some(index),
        Err(Error::IndexNotFound) => None,
        Err(e) => return Err(e),
    };
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut vectors: Vec<EmbeddingVector> = Vec::new();
    if let Some(index) = &previous {
        for c in index.chunks.iter().filter(|c| c.doc_id != doc_id) {
            chunks.push(c.clone());
            vectors.push(EmbeddingVector::new(index.vector(c.chunk_id).to_vec())?);
        }
    }
    chunks.extend(new_chunks);
    vectors.extend(new_vectors);

    let mut index = build_index(course_key, chunks, &vectors, previous.as_ref().map(|p| p.manifest_version))?;
    persist_index(&mut index, course_slug, store)?;
    finalize_upload(course_slug, doc_id, store)?;
    Ok(index)
}

fn job_from_row(row: &Row<'_>) -> rusqlite::Result<Job> {
    Ok(Job {
        job_id: row.get(0)?,
        course_id: row.get(1)?,
        doc_id: row.get(2)?,
        status: crate::courses::parse_col(row, 3)?,
        manifest_version: row.get::<_, Option<i64>>(4)?.map(|v| v as u64),
        error: row.get(5)?,
        created_at: row.get(6)?,
        updated_at: row.get(7)?,
    })
}

impl Db {
    pub fn job(&self, job_id: i64) -> Result<Job> {
        self.conn()
            .query_row(
                "SELECT job_id, course_id, doc_id, status, manifest_version, error, created_at, updated_at
                 FROM jobs WHERE job_id = ?1",
                [job_id],
                job_from_row,
            )
            .optional()?
            .ok_or(Error::JobNotFound)
    }

    fn set_job(&self, job_id: i64, status: JobStatus, version: Option<u64>, error: Option<&str>) -> Result<Job> {
        self.conn().execute(
            "UPDATE jobs SET status = ?2, manifest_version = ?3, error = ?4, updated_at = ?5 WHERE job_id = ?1",
            params![job_id, status.as_str(), version.map(|v| v as i64), error, Utc::now()],
        )?;
        self.job(job_id)
    }

    /// Mark a document indexed, drop its body and refresh the course's chunk
    /// metadata from `index`.
    fn record_indexed(&self, course_id: i64, doc_id: &str, index: &CourseIndex) -> Result<()> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute(
            "UPDATE documents SET indexed = 1, body = NULL, body_retained = 0 WHERE doc_id = ?1",
            [doc_id],
        )?;
        tx.execute("DELETE FROM chunks_meta WHERE course_id = ?1", [course_id])?;
        {
            let mut insert = tx.prepare(
                "INSERT INTO chunks_meta (course_id, chunk_id, doc_id, ordinal, word_count, manifest_version)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for c in &index.chunks {
                insert.execute(params![course_id, c.chunk_id.0, c.doc_id, c.ordinal, c.word_count, index.manifest_version as i64])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn documents(&self, course_id: i64) -> Result<Vec<DocumentInfo>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT doc_id, course_id, title, origin, origin_ref, format, body_retained, indexed, ingested_at
             FROM documents WHERE course_id = ?1 ORDER BY ingested_at, doc_id",
        )?;
        let rows = stmt.query_map([course_id], |r| {
            let origin: String = r.get(3)?;
            Ok(DocumentInfo {
                doc_id: r.get(0)?,
                course_id: r.get(1)?,
                title: r.get(2)?,
                origin: if origin == "youtube" { Origin::Youtube } else { Origin::Upload },
                origin_ref: r.get(4)?,
                format: r.get(5)?,
                body_retained: r.get(6)?,
                indexed: r.get(7)?,
                ingested_at: r.get(8)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}
