//! Multiple-choice quizzes: generation from a course index, storage and
//! scored attempts.

use crate::db::Db;
use crate::error::{Error, Result};
use crate::index::CourseIndex;
use crate::llm::LlmClient;
use crate::retrieve::{bm25_scores, Bm25Params};
use crate::text::index_terms;
use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

pub const OPTIONS_PER_QUESTION: usize = 4;
pub const BLANK: &str = "_____";
/// Chunks shown to the model when it writes a quiz.
const LLM_CONTEXT_CHUNKS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub question_text: String,
    pub options: Vec<String>,
    pub correct_index: usize,
}

impl QuizQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.question_text.trim().is_empty() {
            return Err(Error::InvalidArgument("question text must not be empty".into()));
        }
        if self.options.len() != OPTIONS_PER_QUESTION {
            return Err(Error::InvalidArgument(format!(
                "a question needs exactly {OPTIONS_PER_QUESTION} options, got {}",
                self.options.len()
            )));
        }
        if self.correct_index >= OPTIONS_PER_QUESTION {
            return Err(Error::InvalidArgument("correct_index must be between 0 and 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quiz {
    pub quiz_id: i64,
    pub course_id: i64,
    pub module_label: String,
    pub questions: Vec<QuizQuestion>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizAttempt {
    pub attempt_id: i64,
    pub quiz_id: i64,
    pub user_id: i64,
    pub answers: Vec<usize>,
    pub n_correct: usize,
    pub n_total: usize,
    pub score: f64,
    pub completed_at: DateTime<Utc>,
}

/// Terms of `text` by descending frequency, ties in order of first
/// occurrence.
pub fn terms_by_frequency(text: &str) -> Vec<(String, u32)> {
    let mut order: Vec<(String, u32)> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for term in index_terms(text) {
        match position.get(&term) {
            Some(&i) => order[i].1 += 1,
            None => {
                position.insert(term.clone(), order.len());
                order.push((term, 1));
            }
        }
    }
    // stable sort keeps first-occurrence order among equal counts
    order.sort_by_key(|t| std::cmp::Reverse(t.1));
    order
}

/// Replace every alphanumeric run of `text` equal (case-insensitively) to
/// `term` with [`BLANK`].
pub fn blank_out(text: &str, term: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut String, word: &str| {
        if word.to_lowercase() == term {
            out.push_str(BLANK);
        } else {
            out.push_str(word);
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
        } else {
            if let Some(start) = word_start.take() {
                flush(&mut out, &text[start..i]);
            }
            out.push(c);
        }
    }
    if let Some(start) = word_start {
        flush(&mut out, &text[start..]);
    }
    out
}

/// All chunks ranked by BM25 against the label's terms (zero for no
/// match), ties by chunk id.
fn chunks_for_label<'a>(index: &'a CourseIndex, module_label: &str) -> Vec<&'a crate::chunker::Chunk> {
    let scores = bm25_scores(&index_terms(module_label), index, Bm25Params::default());
    let mut ranked: Vec<_> = index.chunks.iter().collect();
    ranked.sort_by(|a, b| {
        let sa = scores.get(&a.chunk_id).copied().unwrap_or(0.0);
        let sb = scores.get(&b.chunk_id).copied().unwrap_or(0.0);
        sb.total_cmp(&sa).then(a.chunk_id.cmp(&b.chunk_id))
    });
    ranked
}

/// Deterministic cloze questions. Each of the `n` best chunks for the label
/// gets its most frequent term blanked; distractors are the top terms of
/// the other chunks in chunk-id order (then their second terms, and so on).
/// Options are sorted alphabetically.
pub fn cloze_questions(index: &CourseIndex, module_label: &str, n: usize) -> Result<Vec<QuizQuestion>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_questions must be at least 1".into()));
    }
    let ranked: Vec<_> = chunks_for_label(index, module_label)
        .into_iter()
        .filter(|c| !index_terms(&c.text).is_empty())
        .collect();
    if ranked.len() < n {
        return Err(Error::InsufficientContent(format!(
            "{} usable chunks for {n} questions",
            ranked.len()
        )));
    }
    let term_lists: HashMap<_, Vec<String>> = index
        .chunks
        .iter()
        .map(|c| (c.chunk_id, terms_by_frequency(&c.text).into_iter().map(|(t, _)| t).collect()))
        .collect();
    let depth = term_lists.values().map(Vec::len).max().unwrap_or(0);

    let mut questions = Vec::with_capacity(n);
    for chunk in ranked.into_iter().take(n) {
        let answer = term_lists[&chunk.chunk_id][0].clone();
        let mut distractors: Vec<String> = Vec::new();
        let mut seen: HashSet<String> = HashSet::from([answer.clone()]);
        'fill: for level in 0..depth {
            for other in &index.chunks {
                if other.chunk_id == chunk.chunk_id {
                    continue;
                }
                if let Some(term) = term_lists[&other.chunk_id].get(level) {
                    if seen.insert(term.clone()) {
                        distractors.push(term.clone());
                        if distractors.len() == OPTIONS_PER_QUESTION - 1 {
                            break 'fill;
                        }
                    }
                }
            }
        }
        if distractors.len() < OPTIONS_PER_QUESTION - 1 {
            return Err(Error::InsufficientContent("not enough distinct terms for distractors".into()));
        }
        let mut options = distractors;
        options.push(answer.clone());
        options.sort();
        let correct_index = options.iter().position(|o| *o == answer).expect("answer is an option");
        questions.push(QuizQuestion {
            question_text: format!("Fill in the blank: {}", blank_out(&chunk.text, &answer)),
            options,
            correct_index,
        });
    }
    Ok(questions)
}

#[derive(Deserialize)]
struct LlmQuiz {
    questions: Vec<QuizQuestion>,
}

fn quiz_prompt(context: &[&str], module_label: &str, n: usize) -> String {
    format!(
        "Write {n} multiple-choice questions for the course section \"{module_label}\" using only the material below.\n\
         Reply with JSON only, in exactly this shape:\n\
         {{\"questions\": [{{\"question_text\": \"...\", \"options\": [\"...\", \"...\", \"...\", \"...\"], \"correct_index\": 0}}]}}\n\
         Each question has exactly 4 options and correct_index is 0 to 3.\n\n\
         Material:\n{}",
        context.join("\n\n")
    )
}

/// Parse a model reply into exactly `n` valid questions.
pub fn parse_llm_quiz(reply: &str, n: usize) -> Result<Vec<QuizQuestion>> {
    let start = reply.find('{');
    let end = reply.rfind('}');
    let json = match (start, end) {
        (Some(s), Some(e)) if s < e => &reply[s..=e],
        _ => return Err(Error::SerializationFailure("no JSON object in model reply".into())),
    };
    let parsed: LlmQuiz = serde_json::from_str(json)?;
    if parsed.questions.len() != n {
        return Err(Error::SerializationFailure(format!(
            "model returned {} questions, expected {n}",
            parsed.questions.len()
        )));
    }
    for q in &parsed.questions {
        q.validate()?;
    }
    Ok(parsed.questions)
}

/// Questions from the model when one is given and its reply is usable,
/// otherwise [`cloze_questions`].
pub fn generate_questions(
    index: &CourseIndex,
    module_label: &str,
    n: usize,
    llm: Option<&dyn LlmClient>,
) -> Result<Vec<QuizQuestion>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_questions must be at least 1".into()));
    }
    if module_label.trim().is_empty() {
        return Err(Error::InvalidArgument("module_label must not be empty".into()));
    }
    if let Some(llm) = llm {
        let context: Vec<&str> = chunks_for_label(index, module_label)
            .into_iter()
            .take(LLM_CONTEXT_CHUNKS)
            .map(|c| c.text.as_str())
            .collect();
        match llm.complete(&quiz_prompt(&context, module_label, n)).and_then(|r| parse_llm_quiz(&r, n)) {
            Ok(questions) => return Ok(questions),
            Err(e) => tracing::warn!(error = %e, "model quiz unusable, building cloze questions"),
        }
    }
    cloze_questions(index, module_label, n)
}

fn load_questions(conn: &rusqlite::Connection, quiz_id: i64) -> Result<Vec<QuizQuestion>> {
    let mut stmt = conn.prepare(
        "SELECT question_text, options, correct_index FROM quiz_questions WHERE quiz_id = ?1 ORDER BY position",
    )?;
    let rows = stmt.query_map([quiz_id], |r| {
        Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?))
    })?;
    let mut out = Vec::new();
    for row in rows {
        let (question_text, options, correct) = row?;
        out.push(QuizQuestion {
            question_text,
            options: serde_json::from_str(&options)?,
            correct_index: correct as usize,
        });
    }
    Ok(out)
}

impl Db {
    pub fn insert_quiz(&self, course_id: i64, module_label: &str, questions: &[QuizQuestion]) -> Result<Quiz> {
        let module_label = module_label.trim();
        if module_label.is_empty() {
            return Err(Error::InvalidArgument("module_label must not be empty".into()));
        }
        if questions.is_empty() {
            return Err(Error::InvalidArgument("a quiz needs at least one question".into()));
        }
        for q in questions {
            q.validate()?;
        }
        let created_at = Utc::now();
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        tx.execute(
            "INSERT INTO quizzes (course_id, module_label, created_at) VALUES (?1, ?2, ?3)",
            params![course_id, module_label, created_at],
        )?;
        let quiz_id = tx.last_insert_rowid();
        for (position, q) in questions.iter().enumerate() {
            tx.execute(
                "INSERT INTO quiz_questions (quiz_id, position, question_text, options, correct_index)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
                params![quiz_id, position as i64, q.question_text, serde_json::to_string(&q.options)?, q.correct_index as i64],
            )?;
        }
        tx.commit()?;
        Ok(Quiz {
            quiz_id,
            course_id,
            module_label: module_label.to_owned(),
            questions: questions.to_vec(),
            created_at,
        })
    }

    pub fn quiz(&self, quiz_id: i64) -> Result<Quiz> {
        let conn = self.conn();
        let head: Option<(i64, String, DateTime<Utc>)> = conn
            .query_row(
                "SELECT course_id, module_label, created_at FROM quizzes WHERE quiz_id = ?1",
                [quiz_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?;
        let (course_id, module_label, created_at) = head.ok_or(Error::QuizNotFound)?;
        Ok(Quiz {
            quiz_id,
            course_id,
            module_label,
            questions: load_questions(&conn, quiz_id)?,
            created_at,
        })
    }

    /// Score and store an attempt. Attempts are never updated afterwards.
    pub fn record_attempt(&self, user_id: i64, quiz_id: i64, answers: &[usize]) -> Result<QuizAttempt> {
        self.record_attempt_at(user_id, quiz_id, answers, Utc::now())
    }

    pub fn record_attempt_at(
        &self,
        user_id: i64,
        quiz_id: i64,
        answers: &[usize],
        completed_at: DateTime<Utc>,
    ) -> Result<QuizAttempt> {
        let quiz = self.quiz(quiz_id)?;
        if answers.len() != quiz.questions.len() {
            return Err(Error::LengthMismatch);
        }
        if answers.iter().any(|&a| a >= OPTIONS_PER_QUESTION) {
            return Err(Error::InvalidArgument("answers must be option indices 0 to 3".into()));
        }
        let n_correct = quiz
            .questions
            .iter()
            .zip(answers)
            .filter(|(q, &a)| q.correct_index == a)
            .count();
        let n_total = quiz.questions.len();
        let score = n_correct as f64 / n_total as f64;
        let conn = self.conn();
        conn.execute(
            "INSERT INTO quiz_attempts (quiz_id, user_id, answers, n_correct, n_total, score, completed_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![quiz_id, user_id, serde_json::to_string(answers)?, n_correct as i64, n_total as i64, score, completed_at],
        )?;
        Ok(QuizAttempt {
            attempt_id: conn.last_insert_rowid(),
            quiz_id,
            user_id,
            answers: answers.to_vec(),
            n_correct,
            n_total,
            score,
            completed_at,
        })
    }
}
