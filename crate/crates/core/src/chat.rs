//! Prompt-template-governed chat over a course index, and the turn log.

use crate::chunker::{ChunkId, Embedder};
use crate::courses::string_enum;
use crate::db::Db;
use crate::error::{Error, Result};
use crate::index::CourseIndex;
use crate::llm::LlmClient;
use crate::retrieve::{build_query, hybrid_retrieve, RetrievalConfig, RetrievalResult};
use chrono::{DateTime, Utc};
use rusqlite::{params, Row};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// The exact answer of the restricted-mode guard.
pub const REFUSAL: &str = "I don't know.";
/// `model_id` recorded for turns the guard answered without a model call.
pub const GUARD_MODEL_ID: &str = "guard";

const CONTEXT_SLOT: &str = "{context}";
const QUESTION_SLOT: &str = "{question}";

string_enum!(PromptMode { Restricted => "restricted", Relaxed => "relaxed", Medical => "medical" });

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Restricted, PromptMode::Relaxed, PromptMode::Medical];

    /// Template text with `{context}` and `{question}` each on a line of
    /// their own.
    pub fn template(self) -> &'static str {
        match self {
            PromptMode::Restricted => include_str!("../templates/restricted.txt"),
            PromptMode::Relaxed => include_str!("../templates/relaxed.txt"),
            PromptMode::Medical => include_str!("../templates/medical.txt"),
        }
    }

    /// Parse a user-supplied mode name.
    pub fn parse(name: &str) -> Result<Self> {
        name.trim()
            .to_ascii_lowercase()
            .parse()
            .map_err(|_| Error::UnknownMode(name.to_owned()))
    }
}

fn template_parts(mode: PromptMode) -> (&'static str, &'static str, &'static str) {
    let (head, rest) = mode.template().split_once(CONTEXT_SLOT).expect("template has a context slot");
    let (middle, tail) = rest.split_once(QUESTION_SLOT).expect("template has a question slot");
    (head, middle, tail)
}

/// Fill the mode's template. Chunk texts are joined by blank lines in the
/// order given.
pub fn render_prompt<S: AsRef<str>>(mode: PromptMode, context_chunks: &[S], question: &str) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::EmptyQuery);
    }
    let context = context_chunks.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n\n");
    let (head, middle, tail) = template_parts(mode);
    let mut out = String::with_capacity(head.len() + context.len() + middle.len() + question.len() + tail.len());
    out.push_str(head);
    out.push_str(&context);
    out.push_str(middle);
    out.push_str(question);
    out.push_str(tail);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub turn_id: i64,
    pub user_id: i64,
    pub course_id: i64,
    pub mode: PromptMode,
    pub question: String,
    pub context_chunk_ids: Vec<ChunkId>,
    pub rendered_prompt: String,
    pub answer: String,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    pub latency_ms: u64,
    /// Error code when the model call failed; the answer is then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChatOptions {
    pub retrieval: RetrievalConfig,
    /// Answer [`REFUSAL`] without a model call when restricted-mode retrieval
    /// finds nothing.
    pub refusal_guard: bool,
    /// Let the chat model propose retrieval keywords.
    pub llm_keywords: bool,
}

impl Default for ChatOptions {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            refusal_guard: true,
            llm_keywords: false,
        }
    }
}

/// Everything about a turn except who asked it.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub retrieved: Vec<RetrievalResult>,
    pub rendered_prompt: String,
    pub answer: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub error: Option<Error>,
}

/// Retrieve, render and ask. Model failures are reported in
/// [`Reply::error`] so the caller can still record the turn.
pub fn compose_reply(
    index: &CourseIndex,
    embedder: &dyn Embedder,
    llm: Option<&dyn LlmClient>,
    question: &str,
    mode: PromptMode,
    options: &ChatOptions,
) -> Result<Reply> {
    let started = Instant::now();
    let keyword_llm = llm.filter(|_| options.llm_keywords);
    let query = build_query(question, index, embedder, keyword_llm, options.retrieval.max_keywords)?;
    let retrieved = hybrid_retrieve(&query, index, &options.retrieval)?;
    let texts: Vec<&str> = retrieved
        .iter()
        .filter_map(|r| index.chunk(r.chunk_id).map(|c| c.text.as_str()))
        .collect();
    let rendered_prompt = render_prompt(mode, &texts, question)?;
    let elapsed = |started: Instant| started.elapsed().as_millis() as u64;

    if mode == PromptMode::Restricted && options.refusal_guard && retrieved.is_empty() {
        return Ok(Reply {
            retrieved,
            rendered_prompt,
            answer: REFUSAL.to_owned(),
            model_id: GUARD_MODEL_ID.to_owned(),
            latency_ms: elapsed(started),
            error: None,
        });
    }
    let (answer, model_id, error) = match llm {
        None => (String::new(), String::new(), Some(Error::LlmUnavailable("no chat model configured".into()))),
        Some(llm) => match llm.complete(&rendered_prompt) {
            Ok(answer) => (answer, llm.model_id().to_owned(), None),
            Err(e) => {
                let e = match e {
                    Error::LlmUnavailable(_) => e,
                    other => Error::LlmUnavailable(other.to_string()),
                };
                (String::new(), llm.model_id().to_owned(), Some(e))
            }
        },
    };
    Ok(Reply {
        retrieved,
        rendered_prompt,
        answer,
        model_id,
        latency_ms: elapsed(started),
        error,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnFilter {
    pub user_id: Option<i64>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

const TURN_COLS: &str = "turn_id, user_id, course_id, mode, question, context_chunk_ids, rendered_prompt, \
                         answer, model_id, created_at, latency_ms, error";

fn turn_from_row(row: &Row<'_>) -> rusqlite::Result<ChatTurn> {
    let ids: String = row.get(5)?;
    let context_chunk_ids = serde_json::from_str(&ids).map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(5, rusqlite::types::Type::Text, Box::new(e))
    })?;
    Ok(ChatTurn {
        turn_id: row.get(0)?,
        user_id: row.get(1)?,
        course_id: row.get(2)?,
        mode: crate::courses::parse_col(row, 3)?,
        question: row.get(4)?,
        context_chunk_ids,
        rendered_prompt: row.get(6)?,
        answer: row.get(7)?,
        model_id: row.get(8)?,
        created_at: row.get(9)?,
        latency_ms: row.get::<_, i64>(10)?.max(0) as u64,
        error: row.get(11)?,
    })
}

impl Db {
    /// Persist a turn; `turn_id` and `created_at` are assigned here.
    pub fn insert_turn(&self, turn: &ChatTurn) -> Result<ChatTurn> {
        let created_at = Utc::now();
        let conn = self.conn();
        conn.execute(
            &format!("INSERT INTO chat_turns ({TURN_COLS}) VALUES (NULL, ?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)"),
            params![
                turn.user_id,
                turn.course_id,
                turn.mode.as_str(),
                turn.question,
                serde_json::to_string(&turn.context_chunk_ids)?,
                turn.rendered_prompt,
                turn.answer,
                turn.model_id,
                created_at,
                i64::try_from(turn.latency_ms).unwrap_or(i64::MAX),
                turn.error,
            ],
        )?;
        Ok(ChatTurn {
            turn_id: conn.last_insert_rowid(),
            created_at,
            ..turn.clone()
        })
    }

    /// Turns of a course in creation order, without access checks.
    pub fn turns(&self, course_id: i64, filter: &TurnFilter) -> Result<Vec<ChatTurn>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {TURN_COLS} FROM chat_turns
             WHERE course_id = ?1
               AND (?2 IS NULL OR user_id = ?2)
               AND (?3 IS NULL OR created_at >= ?3)
               AND (?4 IS NULL OR created_at <= ?4)
             ORDER BY created_at, turn_id"
        ))?;
        let rows = stmt.query_map(params![course_id, filter.user_id, filter.since, filter.until], turn_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}
