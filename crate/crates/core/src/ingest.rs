//! Turning uploads and YouTube captions into normalized course text.

use crate::error::{Error, Result};
use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Upload,
    Youtube,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Upload => "upload",
            Origin::Youtube => "youtube",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub course_id: i64,
    pub title: String,
    pub origin: Origin,
    /// Upload filename or video URL.
    pub origin_ref: String,
    pub body: String,
    pub ingested_at: DateTime<Utc>,
}

/// One caption line as returned by a transcript provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub text: String,
    #[serde(rename = "start")]
    pub start_seconds: f64,
    #[serde(rename = "duration")]
    pub duration_seconds: f64,
}

impl TranscriptEntry {
    pub fn new(text: impl Into<String>, start_seconds: f64, duration_seconds: f64) -> Self {
        Self {
            text: text.into(),
            start_seconds,
            duration_seconds,
        }
    }
}

/// Extract the 11-character video id from a `watch?v=` or `youtu.be/` URL.
pub fn parse_video_id(url: &str) -> Result<String> {
    let url = url.trim();
    if url.is_empty() {
        return Err(Error::MalformedUrl);
    }
    let parsed = url::Url::parse(url).map_err(|_| Error::MalformedUrl)?;
    let host = parsed.host_str().unwrap_or_default().to_ascii_lowercase();
    let candidate = match host.as_str() {
        "youtu.be" | "www.youtu.be" => parsed
            .path_segments()
            .and_then(|mut segs| segs.next())
            .map(str::to_owned),
        "youtube.com" | "www.youtube.com" | "m.youtube.com" | "music.youtube.com" => {
            if parsed.path() == "/watch" {
                parsed
                    .query_pairs()
                    .find(|(k, _)| k == "v")
                    .map(|(_, v)| v.into_owned())
            } else {
                None
            }
        }
        _ => None,
    };
    match candidate {
        Some(id) if is_video_id(&id) => Ok(id),
        _ => Err(Error::MalformedUrl),
    }
}

fn is_video_id(id: &str) -> bool {
    id.len() == 11
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Source of caption tracks. Implementations must be safe to call from
/// several threads at once.
pub trait TranscriptProvider: Send + Sync {
    /// Title of the video, used as the heading of the cleaned transcript.
    fn video_title(&self, video_id: &str) -> Result<String>;

    /// Caption entries for one language. Returns `LanguageUnavailable` when
    /// the video has captions, just not in `lang`.
    fn transcript(&self, video_id: &str, lang: &str) -> Result<Vec<TranscriptEntry>>;
}

/// Fetch the first available caption track out of `preferred_langs`.
pub fn fetch_transcript(
    provider: &dyn TranscriptProvider,
    video_id: &str,
    preferred_langs: &[String],
) -> Result<(Vec<TranscriptEntry>, String)> {
    if !is_video_id(video_id) {
        return Err(Error::MalformedUrl);
    }
    let title = provider.video_title(video_id)?;
    for lang in preferred_langs {
        match provider.transcript(video_id, lang) {
            Ok(mut entries) => {
                validate_entries(&entries)?;
                entries.sort_by(|a, b| a.start_seconds.total_cmp(&b.start_seconds));
                return Ok((entries, title));
            }
            Err(Error::LanguageUnavailable) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(Error::LanguageUnavailable)
}

fn validate_entries(entries: &[TranscriptEntry]) -> Result<()> {
    for e in entries {
        if !(e.start_seconds.is_finite() && e.start_seconds >= 0.0) {
            return Err(Error::MalformedTranscript(format!(
                "invalid start {}",
                e.start_seconds
            )));
        }
        if !(e.duration_seconds.is_finite() && e.duration_seconds >= 0.0) {
            return Err(Error::MalformedTranscript(format!(
                "invalid duration {}",
                e.duration_seconds
            )));
        }
    }
    Ok(())
}

/// Reads canned provider responses from disk:
/// `<root>/<video_id>/title.txt` and `<root>/<video_id>/<lang>.json`, the
/// latter holding exactly the provider wire shape
/// (`[{"text", "start", "duration"}, ...]`).
#[derive(Debug, Clone)]
pub struct FixtureTranscriptProvider {
    root: PathBuf,
}

impl FixtureTranscriptProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl TranscriptProvider for FixtureTranscriptProvider {
    fn video_title(&self, video_id: &str) -> Result<String> {
        let dir = self.root.join(video_id);
        if !dir.is_dir() {
            return Err(Error::TranscriptUnavailable);
        }
        match std::fs::read_to_string(dir.join("title.txt")) {
            Ok(title) => Ok(title.trim().to_owned()),
            Err(_) => Ok(video_id.to_owned()),
        }
    }

    fn transcript(&self, video_id: &str, lang: &str) -> Result<Vec<TranscriptEntry>> {
        let dir = self.root.join(video_id);
        if !dir.is_dir() {
            return Err(Error::TranscriptUnavailable);
        }
        if lang.is_empty() || !lang.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(Error::LanguageUnavailable);
        }
        let raw = match std::fs::read(dir.join(format!("{lang}.json"))) {
            Ok(raw) => raw,
            Err(_) => return Err(Error::LanguageUnavailable),
        };
        serde_json::from_slice(&raw).map_err(|e| Error::MalformedTranscript(e.to_string()))
    }
}

/// HTTP transcript service speaking the provider contract:
/// `GET {base}/videos/{id}` → `{"title": ...}` and
/// `GET {base}/videos/{id}/transcript?lang=xx` → `[{"text","start","duration"}]`.
/// 404 on the first means no captions; 404 on the second means the language
/// is not offered.
pub struct HttpTranscriptProvider {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpTranscriptProvider {
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_owned(),
            client,
        })
    }
}

#[derive(Deserialize)]
struct VideoMeta {
    title: String,
}

impl TranscriptProvider for HttpTranscriptProvider {
    fn video_title(&self, video_id: &str) -> Result<String> {
        let resp = self
            .client
            .get(format!("{}/videos/{video_id}", self.base))
            .send()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(Error::TranscriptUnavailable);
        }
        let resp = resp
            .error_for_status()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        let meta: VideoMeta = resp
            .json()
            .map_err(|e| Error::MalformedTranscript(e.to_string()))?;
        Ok(meta.title)
    }

    fn transcript(&self, video_id: &str, lang: &str) -> Result<Vec<TranscriptEntry>> {
        let resp = self
            .client
            .get(format!("{}/videos/{video_id}/transcript", self.base))
            .query(&[("lang", lang)])
            .send()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(Error::LanguageUnavailable);
        }
        let resp = resp
            .error_for_status()
            .map_err(|e| Error::ProviderUnreachable(e.to_string()))?;
        resp.json()
            .map_err(|e| Error::MalformedTranscript(e.to_string()))
    }
}

fn cue_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[^\[\]]*\]").expect("valid regex"))
}

fn timestamp_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?::\d+)+(?:[.,]\d+)?").expect("valid regex"))
}

/// Strip bracketed cues, stray brackets and clock-style timestamps, and
/// collapse whitespace.
pub fn clean_caption_text(text: &str) -> String {
    let mut current = text.to_owned();
    loop {
        let without_cues = cue_pattern().replace_all(&current, " ");
        let without_times = timestamp_pattern().replace_all(&without_cues, " ");
        if without_times == current {
            break;
        }
        current = without_times.into_owned();
    }
    // unmatched brackets are cue fragments too
    current
        .replace(['[', ']'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Title, a blank line, then the caption texts joined by single spaces.
/// Timing fields are dropped entirely.
pub fn clean_transcript(entries: &[TranscriptEntry], video_title: &str) -> Result<String> {
    // cues may straddle caption boundaries, so clean the joined text
    let joined = entries
        .iter()
        .map(|e| e.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let body = clean_caption_text(&joined);
    if body.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    Ok(format!("{}\n\n{}", clean_caption_text(video_title), body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocFormat {
    Txt,
    Md,
    Csv,
}

impl DocFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DocFormat::Txt => "txt",
            DocFormat::Md => "md",
            DocFormat::Csv => "csv",
        }
    }
}

impl FromStr for DocFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "txt" | "text" => Ok(DocFormat::Txt),
            "md" | "markdown" => Ok(DocFormat::Md),
            "csv" => Ok(DocFormat::Csv),
            other => Err(Error::UnsupportedFormat(other.to_owned())),
        }
    }
}

fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

/// Decode an uploaded file. Text formats pass through with `\n` newlines;
/// CSV rows become `cell1, cell2, ...` lines, header included.
pub fn parse_upload(bytes: &[u8], format: DocFormat) -> Result<String> {
    if bytes.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::InvalidEncoding)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let out = match format {
        DocFormat::Txt | DocFormat::Md => normalize_newlines(text),
        DocFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(text.as_bytes());
            let mut lines = Vec::new();
            for record in reader.records() {
                let record = record.map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
                let line = record
                    .iter()
                    .map(|cell| normalize_newlines(cell.trim()))
                    .collect::<Vec<_>>()
                    .join(", ");
                lines.push(line);
            }
            lines.join("\n")
        }
    };
    if out.trim().is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(out)
}
