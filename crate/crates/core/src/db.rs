//! Relational storage (SQLite). One connection behind a mutex; every public
//! operation holds it for its whole duration, which makes each one atomic.

use crate::error::Result;
use rusqlite::Connection;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

const SCHEMA: &str = r#"
PRAGMA foreign_keys = ON;

CREATE TABLE IF NOT EXISTS users (
    user_id        INTEGER PRIMARY KEY,
    username       TEXT NOT NULL UNIQUE,
    email          TEXT NOT NULL,
    password_hash  TEXT NOT NULL,
    role           TEXT NOT NULL CHECK (role IN ('instructor', 'learner')),
    created_at     TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS payments (
    payment_id      INTEGER PRIMARY KEY,
    user_id         INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    plan            TEXT NOT NULL,
    amount          INTEGER NOT NULL,
    merchant_txn_id TEXT NOT NULL DEFAULT '',
    status          TEXT NOT NULL CHECK (status IN ('pending', 'confirmed', 'failed')),
    created_at      TEXT NOT NULL,
    CHECK (status <> 'confirmed' OR merchant_txn_id <> '')
);

CREATE TABLE IF NOT EXISTS auth_tokens (
    token_hash  TEXT PRIMARY KEY,
    user_id     INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    expires_at  TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS password_resets (
    token_hash  TEXT PRIMARY KEY,
    user_id     INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    expires_at  TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS courses (
    course_id   INTEGER PRIMARY KEY,
    title       TEXT NOT NULL,
    slug        TEXT NOT NULL UNIQUE,
    visibility  TEXT NOT NULL CHECK (visibility IN ('public', 'private')),
    owner_id    INTEGER NOT NULL REFERENCES users(user_id),
    created_at  TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS grants (
    course_id   INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    user_id     INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    granted_by  INTEGER NOT NULL REFERENCES users(user_id),
    granted_at  TEXT NOT NULL,
    PRIMARY KEY (course_id, user_id)
);

CREATE TABLE IF NOT EXISTS documents (
    doc_id         TEXT PRIMARY KEY,
    course_id      INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    title          TEXT NOT NULL,
    origin         TEXT NOT NULL CHECK (origin IN ('upload', 'youtube')),
    origin_ref     TEXT NOT NULL CHECK (origin_ref <> ''),
    format         TEXT NOT NULL,
    body           TEXT,
    body_retained  INTEGER NOT NULL DEFAULT 1,
    indexed        INTEGER NOT NULL DEFAULT 0,
    ingested_at    TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS chunks_meta (
    course_id         INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    chunk_id          INTEGER NOT NULL,
    doc_id            TEXT NOT NULL,
    ordinal           INTEGER NOT NULL,
    word_count        INTEGER NOT NULL,
    manifest_version  INTEGER NOT NULL,
    PRIMARY KEY (course_id, chunk_id)
);

CREATE TABLE IF NOT EXISTS jobs (
    job_id            INTEGER PRIMARY KEY,
    course_id         INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    doc_id            TEXT NOT NULL,
    status            TEXT NOT NULL CHECK (status IN ('queued', 'building', 'done', 'failed')),
    manifest_version  INTEGER,
    error             TEXT,
    created_at        TEXT NOT NULL,
    updated_at        TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS chat_turns (
    turn_id            INTEGER PRIMARY KEY,
    user_id            INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    course_id          INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    mode               TEXT NOT NULL,
    question           TEXT NOT NULL,
    context_chunk_ids  TEXT NOT NULL,
    rendered_prompt    TEXT NOT NULL,
    answer             TEXT NOT NULL,
    model_id           TEXT NOT NULL,
    created_at         TEXT NOT NULL,
    latency_ms         INTEGER NOT NULL CHECK (latency_ms >= 0),
    error              TEXT
);

CREATE TABLE IF NOT EXISTS quizzes (
    quiz_id       INTEGER PRIMARY KEY,
    course_id     INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    module_label  TEXT NOT NULL CHECK (module_label <> ''),
    created_at    TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS quiz_questions (
    quiz_id        INTEGER NOT NULL REFERENCES quizzes(quiz_id) ON DELETE CASCADE,
    position       INTEGER NOT NULL,
    question_text  TEXT NOT NULL,
    options        TEXT NOT NULL,
    correct_index  INTEGER NOT NULL CHECK (correct_index BETWEEN 0 AND 3),
    PRIMARY KEY (quiz_id, position)
);

CREATE TABLE IF NOT EXISTS quiz_attempts (
    attempt_id    INTEGER PRIMARY KEY,
    quiz_id       INTEGER NOT NULL REFERENCES quizzes(quiz_id) ON DELETE CASCADE,
    user_id       INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    answers       TEXT NOT NULL,
    n_correct     INTEGER NOT NULL,
    n_total       INTEGER NOT NULL,
    score         REAL NOT NULL CHECK (score >= 0 AND score <= 1),
    completed_at  TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS sessions (
    session_id  INTEGER PRIMARY KEY,
    user_id     INTEGER NOT NULL REFERENCES users(user_id) ON DELETE CASCADE,
    course_id   INTEGER NOT NULL REFERENCES courses(course_id) ON DELETE CASCADE,
    started_at  TEXT NOT NULL,
    ended_at    TEXT,
    CHECK (ended_at IS NULL OR ended_at >= started_at)
);

CREATE INDEX IF NOT EXISTS idx_turns_course ON chat_turns(course_id, created_at);
CREATE INDEX IF NOT EXISTS idx_attempts_quiz ON quiz_attempts(quiz_id, user_id);
CREATE INDEX IF NOT EXISTS idx_sessions_course ON sessions(course_id);
"#;

pub struct Db {
    conn: Mutex<Connection>,
}

impl Db {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    pub(crate) fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

impl std::fmt::Debug for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Db").finish_non_exhaustive()
    }
}
