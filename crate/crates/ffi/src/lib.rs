//! C ABI over the retrieval and evaluation core.
//!
//! Conventions:
//! - Every fallible function returns a [`CkStatus`]; on failure the error
//!   code and message are kept per thread, see [`ck_last_error_code`] and
//!   [`ck_last_error_message`].
//! - Strings are NUL-terminated UTF-8. Strings returned through `out`
//!   parameters are owned by the caller and released with
//!   [`ck_string_free`].
//! - [`CkIndex`] handles come from [`ck_index_open`] and are released with
//!   [`ck_index_free`]. A handle may be shared between threads for queries.

use coursekb::analytics::{RougeMetric, RougeScore};
use coursekb::chat::{render_prompt, PromptMode};
use coursekb::chunker::LocalEmbedder;
use coursekb::index::{load_index, CourseIndex, FsStore};
use coursekb::ingest::{clean_transcript, TranscriptEntry};
use coursekb::retrieve::{build_query, hybrid_retrieve, RetrievalConfig};
use coursekb::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad argument value; see the last error for details.
    InvalidArgument = 3,
    /// No index exists for the course.
    NotFound = 4,
    /// The stored index failed validation.
    CorruptIndex = 5,
    /// Object store could not be read.
    StoreUnavailable = 6,
    /// Any other failure, including a caught panic.
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkRougeMetric {
    Rouge1 = 0,
    Rouge2 = 1,
    RougeL = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CkRougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A loaded course index. Opaque to C.
pub struct CkIndex {
    index: CourseIndex,
    embedder: LocalEmbedder,
}

struct LastError {
    code: CString,
    message: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn to_cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("NUL bytes were replaced")
}

fn set_last_error(code: &str, message: &str) {
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(LastError {
            code: to_cstring(code),
            message: to_cstring(message),
        })
    });
}

fn status_of(err: &Error) -> CkStatus {
    match err {
        Error::IndexNotFound => CkStatus::NotFound,
        Error::CorruptIndex(_) => CkStatus::CorruptIndex,
        Error::StoreUnavailable(_) => CkStatus::StoreUnavailable,
        Error::Internal(_) | Error::Database(_) | Error::SerializationFailure(_) => CkStatus::Internal,
        _ => CkStatus::InvalidArgument,
    }
}

/// Failure of an FFI call before it reaches the core.
enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Run `f`, record any failure, and turn panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CkStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_last_error("null_argument", &format!("{name} must not be NULL"));
            CkStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(name))) => {
            set_last_error("invalid_utf8", &format!("{name} is not valid UTF-8"));
            CkStatus::InvalidUtf8
        }
        Ok(Err(Fail::Core(e))) => {
            set_last_error(e.code(), &e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal_error", "panic inside coursekb");
            CkStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated string.
unsafe fn arg<'a>(ptr: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Fail::Utf8(name))
}

/// # Safety
/// `out` must be NULL or valid for a pointer write.
unsafe fn write_string(out: *mut *mut c_char, value: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = to_cstring(value).into_raw();
    Ok(())
}

/// Load the index of `course` (title or slug) from a filesystem object
/// store rooted at `store_root`.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be
/// valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ck_index_open(
    store_root: *const c_char,
    course: *const c_char,
    out: *mut *mut CkIndex,
) -> CkStatus {
    guard(|| {
        let root = arg(store_root, "store_root")?;
        let course = arg(course, "course")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let store = FsStore::new(root).map_err(Error::from)?;
        let index = load_index(course, &store)?;
        let embedder = LocalEmbedder::new(index.dims);
        *out = Box::into_raw(Box::new(CkIndex { index, embedder }));
        Ok(())
    })
}

/// # Safety
/// `index` must be NULL or a handle from [`ck_index_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_index_free(index: *mut CkIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of chunks, or 0 for a NULL handle.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_index_n_chunks(index: *const CkIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.n_chunks())
}

/// Manifest version, or 0 for a NULL handle.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_index_manifest_version(index: *const CkIndex) -> u64 {
    index.as_ref().map_or(0, |i| i.index.manifest_version)
}

/// Hybrid retrieval. Writes a JSON array of
/// `{chunk_id, bm25_score, cosine_score, fused_score, rank, doc_id, text}`
/// to `out_json`. `k` of 0 and negative `alpha` select the defaults.
///
/// # Safety
/// `index` must be a live handle, `question` a valid string and
/// `out_json` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ck_index_query_json(
    index: *const CkIndex,
    question: *const c_char,
    k: u32,
    alpha: f64,
    out_json: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let handle = index.as_ref().ok_or(Fail::Null("index"))?;
        let question = arg(question, "question")?;
        let mut config = RetrievalConfig::default();
        if k > 0 {
            config.k = k as usize;
        }
        if alpha >= 0.0 {
            config.alpha = alpha;
        }
        let query = build_query(question, &handle.index, &handle.embedder, None, config.max_keywords)?;
        let rows: Vec<serde_json::Value> = hybrid_retrieve(&query, &handle.index, &config)?
            .into_iter()
            .map(|r| {
                let chunk = &handle.index.chunks[r.chunk_id.0 as usize];
                serde_json::json!({
                    "chunk_id": r.chunk_id,
                    "bm25_score": r.bm25_score,
                    "cosine_score": r.cosine_score,
                    "fused_score": r.fused_score,
                    "rank": r.rank,
                    "doc_id": chunk.doc_id,
                    "text": chunk.text,
                })
            })
            .collect();
        let json = serde_json::to_string(&rows).map_err(Error::from)?;
        write_string(out_json, &json)
    })
}

/// ROUGE score of `candidate` against `reference`.
///
/// # Safety
/// String arguments must be valid strings; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ck_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    metric: CkRougeMetric,
    out: *mut CkRougeScore,
) -> CkStatus {
    guard(|| {
        let candidate = arg(candidate, "candidate")?;
        let reference = arg(reference, "reference")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let metric = match metric {
            CkRougeMetric::Rouge1 => RougeMetric::Rouge1,
            CkRougeMetric::Rouge2 => RougeMetric::Rouge2,
            CkRougeMetric::RougeL => RougeMetric::RougeL,
        };
        let RougeScore { precision, recall, f1 } = metric.score(candidate, reference)?;
        *out = CkRougeScore { precision, recall, f1 };
        Ok(())
    })
}

/// Clean caption entries given as the provider JSON array
/// `[{"text", "start", "duration"}]` and prefix the video title.
///
/// # Safety
/// String arguments must be valid strings; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ck_clean_transcript(
    entries_json: *const c_char,
    title: *const c_char,
    out: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let entries = arg(entries_json, "entries_json")?;
        let title = arg(title, "title")?;
        let entries: Vec<TranscriptEntry> =
            serde_json::from_str(entries).map_err(|e| Error::MalformedTranscript(e.to_string()))?;
        write_string(out, &clean_transcript(&entries, title)?)
    })
}

/// Render the prompt of `mode` (`restricted`, `relaxed` or `medical`) with
/// context chunks given as a JSON array of strings in rank order.
///
/// # Safety
/// String arguments must be valid strings; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ck_render_prompt(
    mode: *const c_char,
    context_json: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let mode = PromptMode::parse(arg(mode, "mode")?)?;
        let context: Vec<String> = serde_json::from_str(arg(context_json, "context_json")?)
            .map_err(|e| Error::InvalidArgument(format!("context_json: {e}")))?;
        let question = arg(question, "question")?;
        write_string(out, &render_prompt(mode, &context, question)?)
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Machine code of the last failure on this thread (e.g. `index_not_found`),
/// or NULL. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ck_last_error_code() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |e| e.code.as_ptr()))
}

/// Human-readable message of the last failure on this thread, or NULL.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ck_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |e| e.message.as_ptr()))
}
