//! Administrative command line. Commands work directly on the configured
//! stores and skip authentication, so they are for operators only.

use crate::analytics::{time_csv, weak_modules_csv, RougeMetric, RougeScore, DEFAULT_WEAK_THRESHOLD};
use crate::api::ApiError;
use crate::chat::{compose_reply, PromptMode};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::index::{load_index, raw_prefix};
use crate::ingest::{clean_transcript, fetch_transcript, parse_upload, parse_video_id, DocFormat};
use crate::retrieve::{build_query, hybrid_retrieve, RetrievalResult};
use crate::service::index_document;
use crate::text::slug;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Parser)]
#[command(name = "coursekb", version, about = "Course knowledge base administration")]
pub struct Cli {
    /// TOML configuration file; environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve,
    /// Add a file or YouTube video to a course index and print the new
    /// manifest version.
    Ingest {
        #[arg(long)]
        course: String,
        /// File path or YouTube URL.
        source: String,
        /// txt, md or csv; defaults to the file extension.
        format: Option<String>,
    },
    /// Print the ranked context for a question, and the answer when a chat
    /// model is configured.
    Query {
        #[arg(long)]
        course: String,
        question: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "restricted")]
        mode: String,
    },
    /// Score recorded answers against references as CSV.
    EvalRouge {
        turns_file: PathBuf,
        refs_file: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Rouge1)]
        metric: MetricArg,
    },
    /// Print an analytics report as CSV.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
        #[arg(long)]
        course: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    #[value(name = "rouge1")]
    Rouge1,
    #[value(name = "rouge2")]
    Rouge2,
    #[value(name = "rougeL")]
    RougeL,
}

impl From<MetricArg> for RougeMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Rouge1 => RougeMetric::Rouge1,
            MetricArg::Rouge2 => RougeMetric::Rouge2,
            MetricArg::RougeL => RougeMetric::RougeL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    WeakModules,
    Time,
}

/// Print a failure the way the API reports it.
pub fn report_error(err: &Error, stderr: &mut dyn Write) {
    let body = serde_json::to_string(&ApiError::from(err.clone())).unwrap_or_else(|_| err.to_string());
    let _ = writeln!(stderr, "{body}");
}

/// Run every command except `serve`, writing results to `out`.
pub fn execute(config: &Config, command: Command, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::Internal(e.to_string());
    match command {
        Command::Serve => Err(Error::InvalidArgument("serve is handled by the binary".into())),
        Command::Ingest { course, source, format } => {
            let version = ingest(config, &course, &source, format.as_deref())?;
            writeln!(out, "{version}").map_err(io)
        }
        Command::Query { course, question, alpha, k, mode } => {
            let output = query(config, &course, &question, alpha, k, &mode)?;
            serde_json::to_writer_pretty(&mut *out, &output)?;
            writeln!(out).map_err(io)
        }
        Command::EvalRouge { turns_file, refs_file, metric } => {
            let csv = eval_rouge(&read(&turns_file)?, &read(&refs_file)?, metric.into())?;
            out.write_all(csv.as_bytes()).map_err(io)
        }
        Command::Report { kind, course, threshold } => {
            let platform = config.build_platform()?;
            let course = platform.db.course_by_slug(&slug(&course))?;
            let csv = match kind {
                ReportKind::WeakModules => weak_modules_csv(
                    &platform
                        .db
                        .weak_module_report(course.course_id, threshold.unwrap_or(DEFAULT_WEAK_THRESHOLD))?,
                )?,
                ReportKind::Time => time_csv(&[(course.course_id, platform.db.avg_time_spent(course.course_id)?)])?,
            };
            out.write_all(csv.as_bytes()).map_err(io)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))
}

/// Key used for a course in a persisted index: its database id when the
/// course is registered, otherwise its slug.
fn course_key(config: &Config, course_slug: &str) -> Result<String> {
    let db = crate::db::Db::open(config.db_file())?;
    match db.course_by_slug(course_slug) {
        Ok(course) => Ok(course.course_id.to_string()),
        Err(Error::CourseNotFound) => Ok(course_slug.to_owned()),
        Err(e) => Err(e),
    }
}

fn ingest(config: &Config, course: &str, source: &str, format: Option<&str>) -> Result<u64> {
    config.validate()?;
    let course_slug = slug(course);
    let store = config.object_store()?;
    let embedder = config.embedder()?;
    let is_url = source.starts_with("http://") || source.starts_with("https://");
    let (raw, body, extension, origin) = if is_url {
        let video_id = parse_video_id(source)?;
        let (entries, title) = fetch_transcript(config.transcripts()?.as_ref(), &video_id, &["en".to_owned()])?;
        let body = clean_transcript(&entries, &title)?;
        (body.clone().into_bytes(), body, "txt", source.to_owned())
    } else {
        let path = Path::new(source);
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidArgument(format!("cannot read {source}: {e}")))?;
        let format: DocFormat = format
            .or_else(|| path.extension().and_then(|e| e.to_str()))
            .unwrap_or("")
            .parse()?;
        let body = parse_upload(&bytes, format)?;
        let origin = std::fs::canonicalize(path).map_or_else(|_| source.to_owned(), |p| p.display().to_string());
        (bytes, body, format.extension(), origin)
    };
    // re-ingesting the same source replaces its chunks
    let doc_id = format!("s{}", &hex::encode(Sha256::digest(origin.as_bytes()))[..24]);
    store.put(&format!("{}{doc_id}.{extension}", raw_prefix(&course_slug)), &raw)?;
    let index = index_document(
        store.as_ref(),
        embedder.as_ref(),
        crate::chunker::ChunkParams {
            max_chunk_words: config.max_chunk_words,
            overlap_words: config.overlap_words,
        },
        &course_slug,
        &course_key(config, &course_slug)?,
        &doc_id,
        &body,
    )?;
    Ok(index.manifest_version)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryOutput {
    pub course: String,
    pub manifest_version: u64,
    pub keywords: Vec<String>,
    pub results: Vec<QueryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryRow {
    #[serde(flatten)]
    pub result: RetrievalResult,
    pub doc_id: String,
}

fn query(
    config: &Config,
    course: &str,
    question: &str,
    alpha: Option<f64>,
    k: Option<usize>,
    mode: &str,
) -> Result<QueryOutput> {
    let mode = PromptMode::parse(mode)?;
    let mut options = config.chat_options()?;
    options.retrieval.alpha = alpha.unwrap_or(options.retrieval.alpha);
    options.retrieval.k = k.unwrap_or(options.retrieval.k);
    let course_slug = slug(course);
    let store = config.object_store()?;
    let index = load_index(&course_slug, store.as_ref())?;
    let embedder: Arc<dyn crate::chunker::Embedder> = config.embedder()?;
    let llm = config.llm()?;
    let keyword_llm = llm.as_deref().filter(|_| options.llm_keywords);
    let query = build_query(question, &index, embedder.as_ref(), keyword_llm, options.retrieval.max_keywords)?;
    let (retrieved, answer) = match llm.as_deref() {
        Some(llm) => {
            let reply = compose_reply(&index, embedder.as_ref(), Some(llm), question, mode, &options)?;
            if let Some(e) = reply.error {
                return Err(e);
            }
            (reply.retrieved, Some(reply.answer))
        }
        None => (hybrid_retrieve(&query, &index, &options.retrieval)?, None),
    };
    Ok(QueryOutput {
        course: course_slug,
        manifest_version: index.manifest_version,
        keywords: query.keywords,
        results: retrieved
            .into_iter()
            .map(|result| QueryRow {
                doc_id: index.chunks[result.chunk_id.0 as usize].doc_id.clone(),
                result,
            })
            .collect(),
        answer,
    })
}

/// Records of an evaluation file keyed by id. Accepts a JSON array or JSON
/// Lines of objects carrying `turn_id` (or `id`) and `answer`, `reference`
/// or `text`; anything else is read as plain text, one record per line,
/// keyed by line number.
pub fn parse_records(text: &str) -> Result<BTreeMap<i64, String>> {
    #[derive(Deserialize)]
    struct Record {
        #[serde(alias = "id")]
        turn_id: i64,
        #[serde(alias = "reference", alias = "text")]
        answer: String,
    }
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let records: Vec<Record> = serde_json::from_str(trimmed)?;
        return Ok(records.into_iter().map(|r| (r.turn_id, r.answer)).collect());
    }
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if !lines.is_empty() && lines.iter().all(|l| l.trim_start().starts_with('{')) {
        let mut out = BTreeMap::new();
        for line in lines {
            let r: Record = serde_json::from_str(line)?;
            out.insert(r.turn_id, r.answer);
        }
        return Ok(out);
    }
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i as i64 + 1, l.to_owned()))
        .collect())
}

/// CSV `turn_id,precision,recall,f1` per candidate, then a `mean` row.
pub fn eval_rouge(candidates: &str, references: &str, metric: RougeMetric) -> Result<String> {
    let candidates = parse_records(candidates)?;
    let references = parse_records(references)?;
    if candidates.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::SerializationFailure(e.to_string());
    w.write_record(["turn_id", "precision", "recall", "f1"]).map_err(csv_err)?;
    let mut sum = (0.0, 0.0, 0.0);
    for (id, candidate) in &candidates {
        let reference = references
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference for turn {id}")))?;
        let RougeScore { precision, recall, f1 } = metric.score(candidate, reference)?;
        sum = (sum.0 + precision, sum.1 + recall, sum.2 + f1);
        w.write_record([id.to_string(), precision.to_string(), recall.to_string(), f1.to_string()])
            .map_err(csv_err)?;
    }
    let n = candidates.len() as f64;
    w.write_record(["mean".to_owned(), (sum.0 / n).to_string(), (sum.1 / n).to_string(), (sum.2 / n).to_string()])
        .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::SerializationFailure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::SerializationFailure(e.to_string()))
}
