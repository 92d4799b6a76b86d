use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the platform can report.
///
/// Each variant maps to a stable machine code (see [`Error::code`]) which is
/// what the HTTP layer and the CLI surface to callers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // ingestion
    #[error("no YouTube video id could be found in the URL")]
    MalformedUrl,
    #[error("no captions are available for this video")]
    TranscriptUnavailable,
    #[error("none of the requested caption languages are available")]
    LanguageUnavailable,
    #[error("malformed transcript payload: {0}")]
    MalformedTranscript(String),
    #[error("transcript contains no text after cleaning")]
    EmptyTranscript,
    #[error("upload is not valid UTF-8")]
    InvalidEncoding,
    #[error("unsupported document format: {0}")]
    UnsupportedFormat(String),
    #[error("document is empty")]
    EmptyDocument,
    #[error("external provider unreachable: {0}")]
    ProviderUnreachable(String),

    // chunking, embedding, indexing
    #[error("input is empty")]
    EmptyInput,
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("course has no content to index")]
    EmptyCourse,
    #[error("object store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("serialization failure: {0}")]
    SerializationFailure(String),
    #[error("no index exists for this course")]
    IndexNotFound,
    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    // retrieval and chat
    #[error("query is empty")]
    EmptyQuery,
    #[error("index is empty")]
    EmptyIndex,
    #[error("unknown prompt mode: {0}")]
    UnknownMode(String),
    #[error("language model unavailable: {0}")]
    LlmUnavailable(String),

    // identity and courses
    #[error("access denied")]
    AccessDenied,
    #[error("authentication required")]
    Unauthorized,
    #[error("username already taken")]
    UsernameTaken,
    #[error("password must be at least 8 characters")]
    WeakPassword,
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("token is invalid or expired")]
    InvalidToken,
    #[error("payment required before login")]
    PaymentRequired,
    #[error("payment gateway unreachable: {0}")]
    GatewayUnreachable(String),
    #[error("payment failed")]
    PaymentFailed,
    #[error("a course with this slug already exists")]
    DuplicateSlug,
    #[error("course is not private")]
    NotPrivateCourse,
    #[error("course not found")]
    CourseNotFound,
    #[error("user not found")]
    UserNotFound,
    #[error("job not found")]
    JobNotFound,

    // analytics
    #[error("quiz not found")]
    QuizNotFound,
    #[error("answer count does not match question count")]
    LengthMismatch,
    #[error("not enough usable content: {0}")]
    InsufficientContent(String),
    #[error("text is empty")]
    EmptyText,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("database error: {0}")]
    Database(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            MalformedUrl => "malformed_url",
            TranscriptUnavailable => "transcript_unavailable",
            LanguageUnavailable => "language_unavailable",
            MalformedTranscript(_) => "malformed_transcript",
            EmptyTranscript => "empty_transcript",
            InvalidEncoding => "invalid_encoding",
            UnsupportedFormat(_) => "unsupported_format",
            EmptyDocument => "empty_document",
            ProviderUnreachable(_) => "provider_unreachable",
            EmptyInput => "empty_input",
            DimensionMismatch { .. } => "dimension_mismatch",
            EmptyCourse => "empty_course",
            StoreUnavailable(_) => "store_unavailable",
            SerializationFailure(_) => "serialization_failure",
            IndexNotFound => "index_not_found",
            CorruptIndex(_) => "corrupt_index",
            EmptyQuery => "empty_query",
            EmptyIndex => "empty_index",
            UnknownMode(_) => "unknown_mode",
            LlmUnavailable(_) => "llm_unavailable",
            AccessDenied => "access_denied",
            Unauthorized => "unauthorized",
            UsernameTaken => "username_taken",
            WeakPassword => "weak_password",
            InvalidCredentials => "invalid_credentials",
            InvalidToken => "invalid_token",
            PaymentRequired => "payment_required",
            GatewayUnreachable(_) => "gateway_unreachable",
            PaymentFailed => "payment_failed",
            DuplicateSlug => "duplicate_slug",
            NotPrivateCourse => "not_private_course",
            CourseNotFound => "course_not_found",
            UserNotFound => "user_not_found",
            JobNotFound => "job_not_found",
            QuizNotFound => "quiz_not_found",
            LengthMismatch => "length_mismatch",
            InsufficientContent(_) => "insufficient_content",
            EmptyText => "empty_text",
            InvalidArgument(_) => "invalid_argument",
            Database(_) => "database_error",
            Internal(_) => "internal_error",
        }
    }
}

impl From<rusqlite::Error> for Error {
    fn from(err: rusqlite::Error) -> Self {
        Error::Database(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::SerializationFailure(err.to_string())
    }
}
