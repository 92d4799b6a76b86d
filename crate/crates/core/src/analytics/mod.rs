//! Learner analytics: quizzes, weak-module counts, time on course, and
//! ROUGE evaluation of recorded answers.

pub mod quiz;
pub mod rouge;

pub use quiz::{cloze_questions, generate_questions, Quiz, QuizAttempt, QuizQuestion};
pub use rouge::{lcs_len, lcs_overlap, ngram_overlap, rouge_l, rouge_n, OverlapCounts, RougeMetric, RougeScore};

use crate::db::Db;
use crate::error::{Error, Result};
use chrono::{DateTime, Duration, Utc};
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_WEAK_THRESHOLD: f64 = 0.5;
/// Chat activity closer together than this extends the same session.
pub const SESSION_GAP_MINUTES: i64 = 30;

pub const WEAK_MODULES_CSV_HEADER: [&str; 2] = ["module_label", "weak_user_count"];
pub const TIME_CSV_HEADER: [&str; 2] = ["course_id", "avg_seconds"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: i64,
    pub user_id: i64,
    pub course_id: i64,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("threshold must lie in [0, 1]".into()))
    }
}

impl Db {
    /// For each module label of the course, the number of distinct users
    /// whose best score over that module's quizzes is below `threshold`.
    /// Users without attempts are not counted; every label appears.
    pub fn weak_module_report(&self, course_id: i64, threshold: f64) -> Result<BTreeMap<String, usize>> {
        check_threshold(threshold)?;
        self.course(course_id)?;
        let conn = self.conn();
        let mut report: BTreeMap<String, usize> = BTreeMap::new();
        let mut labels = conn.prepare("SELECT DISTINCT module_label FROM quizzes WHERE course_id = ?1")?;
        for label in labels.query_map([course_id], |r| r.get::<_, String>(0))? {
            report.insert(label?, 0);
        }
        let mut best = conn.prepare(
            "SELECT q.module_label, MAX(a.score)
             FROM quiz_attempts a JOIN quizzes q ON q.quiz_id = a.quiz_id
             WHERE q.course_id = ?1
             GROUP BY q.module_label, a.user_id",
        )?;
        for row in best.query_map([course_id], |r| Ok((r.get::<_, String>(0)?, r.get::<_, f64>(1)?)))? {
            let (label, best_score) = row?;
            if best_score < threshold {
                *report.entry(label).or_insert(0) += 1;
            }
        }
        Ok(report)
    }

    /// Mean duration of the course's closed sessions in seconds; 0 when
    /// there are none.
    pub fn avg_time_spent(&self, course_id: i64) -> Result<f64> {
        self.course(course_id)?;
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT started_at, ended_at FROM sessions WHERE course_id = ?1 AND ended_at IS NOT NULL")?;
        let mut total = 0.0;
        let mut count = 0usize;
        for row in stmt.query_map([course_id], |r| {
            Ok((r.get::<_, DateTime<Utc>>(0)?, r.get::<_, DateTime<Utc>>(1)?))
        })? {
            let (start, end) = row?;
            total += (end - start).num_milliseconds() as f64 / 1000.0;
            count += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    pub fn start_session(&self, user_id: i64, course_id: i64, at: DateTime<Utc>) -> Result<SessionLog> {
        let conn = self.conn();
        conn.execute(
            "INSERT INTO sessions (user_id, course_id, started_at) VALUES (?1, ?2, ?3)",
            params![user_id, course_id, at],
        )?;
        Ok(SessionLog {
            session_id: conn.last_insert_rowid(),
            user_id,
            course_id,
            started_at: at,
            ended_at: None,
        })
    }

    pub fn end_session(&self, session_id: i64, at: DateTime<Utc>) -> Result<SessionLog> {
        let session = self.session(session_id)?;
        if at < session.started_at {
            return Err(Error::InvalidArgument("a session cannot end before it starts".into()));
        }
        self.conn()
            .execute("UPDATE sessions SET ended_at = ?2 WHERE session_id = ?1", params![session_id, at])?;
        Ok(SessionLog {
            ended_at: Some(at),
            ..session
        })
    }

    pub fn session(&self, session_id: i64) -> Result<SessionLog> {
        self.conn()
            .query_row(
                "SELECT session_id, user_id, course_id, started_at, ended_at FROM sessions WHERE session_id = ?1",
                [session_id],
                |r| {
                    Ok(SessionLog {
                        session_id: r.get(0)?,
                        user_id: r.get(1)?,
                        course_id: r.get(2)?,
                        started_at: r.get(3)?,
                        ended_at: r.get(4)?,
                    })
                },
            )
            .optional()?
            .ok_or_else(|| Error::InvalidArgument(format!("no session {session_id}")))
    }

    /// Record activity at `at`: extends the user's latest session on the
    /// course when it ended less than [`SESSION_GAP_MINUTES`] earlier,
    /// otherwise opens a new one.
    pub fn touch_session(&self, user_id: i64, course_id: i64, at: DateTime<Utc>) -> Result<i64> {
        let conn = self.conn();
        let latest: Option<(i64, DateTime<Utc>, Option<DateTime<Utc>>)> = conn
            .query_row(
                "SELECT session_id, started_at, ended_at FROM sessions
                 WHERE user_id = ?1 AND course_id = ?2 ORDER BY started_at DESC, session_id DESC LIMIT 1",
                [user_id, course_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?;
        if let Some((id, started, ended)) = latest {
            let last = ended.unwrap_or(started);
            if at >= last && at - last <= Duration::minutes(SESSION_GAP_MINUTES) {
                conn.execute("UPDATE sessions SET ended_at = ?2 WHERE session_id = ?1", params![id, at])?;
                return Ok(id);
            }
        }
        conn.execute(
            "INSERT INTO sessions (user_id, course_id, started_at, ended_at) VALUES (?1, ?2, ?3, ?3)",
            params![user_id, course_id, at],
        )?;
        Ok(conn.last_insert_rowid())
    }
}

pub fn weak_modules_csv(report: &BTreeMap<String, usize>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::SerializationFailure(e.to_string());
    w.write_record(WEAK_MODULES_CSV_HEADER).map_err(to_err)?;
    for (label, count) in report {
        w.write_record([label.as_str(), &count.to_string()]).map_err(to_err)?;
    }
    finish_csv(w)
}

pub fn time_csv(rows: &[(i64, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::SerializationFailure(e.to_string());
    w.write_record(TIME_CSV_HEADER).map_err(to_err)?;
    for (course_id, seconds) in rows {
        w.write_record([course_id.to_string(), seconds.to_string()]).map_err(to_err)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::SerializationFailure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::SerializationFailure(e.to_string()))
}
