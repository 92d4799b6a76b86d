//! Runtime configuration: an optional TOML file, overridden by
//! environment variables of the same names in upper case.

use crate::chat::ChatOptions;
use crate::chunker::{ChunkParams, Embedder, LocalEmbedder, RemoteEmbedder, LOCAL_EMBEDDING_DIMS};
use crate::courses::StubGateway;
use crate::db::Db;
use crate::error::{Error, Result};
use crate::index::{FsStore, ObjectStore, S3Config, S3Store};
use crate::ingest::{FixtureTranscriptProvider, HttpTranscriptProvider, TranscriptProvider};
use crate::llm::{HttpLlmClient, LlmClient};
use crate::retrieve::{Fusion, DEFAULT_RRF_K};
use crate::service::Platform;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedProvider {
    Local,
    Remote,
}

#[derive(Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen_addr: String,
    /// SQLite file; `sqlite://` URLs are accepted.
    pub db_path: String,
    pub object_store_root: PathBuf,
    pub s3_endpoint: Option<String>,
    pub s3_bucket: Option<String>,
    pub s3_region: String,
    pub s3_access_key: Option<String>,
    pub s3_secret_key: Option<String>,
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    pub llm_api_key: Option<String>,
    /// Let the chat model propose retrieval keywords.
    pub llm_keywords: bool,
    pub embed_provider: EmbedProvider,
    pub embed_endpoint: Option<String>,
    pub embed_model: String,
    pub embed_api_key: Option<String>,
    pub embed_dims: usize,
    pub transcript_endpoint: Option<String>,
    pub transcript_fixtures: Option<PathBuf>,
    pub max_chunk_words: usize,
    pub overlap_words: usize,
    pub k: usize,
    pub alpha: f64,
    /// `weighted` or `rrf`.
    pub fusion: String,
    pub refusal_guard: bool,
}

impl Default for Config {
    fn default() -> Self {
        let chat = ChatOptions::default();
        let chunking = ChunkParams::default();
        Self {
            listen_addr: "127.0.0.1:8080".into(),
            db_path: "coursekb.sqlite".into(),
            object_store_root: PathBuf::from("objects"),
            s3_endpoint: None,
            s3_bucket: None,
            s3_region: "us-east-1".into(),
            s3_access_key: None,
            s3_secret_key: None,
            llm_endpoint: None,
            llm_model: "default".into(),
            llm_api_key: None,
            llm_keywords: chat.llm_keywords,
            embed_provider: EmbedProvider::Local,
            embed_endpoint: None,
            embed_model: "default".into(),
            embed_api_key: None,
            embed_dims: LOCAL_EMBEDDING_DIMS,
            transcript_endpoint: None,
            transcript_fixtures: None,
            max_chunk_words: chunking.max_chunk_words,
            overlap_words: chunking.overlap_words,
            k: chat.retrieval.k,
            alpha: chat.retrieval.alpha,
            fusion: "weighted".into(),
            refusal_guard: chat.refusal_guard,
        }
    }
}

impl std::fmt::Debug for Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let redact = |v: &Option<String>| v.as_ref().map(|_| "<redacted>");
        f.debug_struct("Config")
            .field("listen_addr", &self.listen_addr)
            .field("db_path", &self.db_path)
            .field("object_store_root", &self.object_store_root)
            .field("s3_endpoint", &self.s3_endpoint)
            .field("s3_bucket", &self.s3_bucket)
            .field("s3_access_key", &redact(&self.s3_access_key))
            .field("s3_secret_key", &redact(&self.s3_secret_key))
            .field("llm_endpoint", &self.llm_endpoint)
            .field("llm_model", &self.llm_model)
            .field("llm_api_key", &redact(&self.llm_api_key))
            .field("embed_provider", &self.embed_provider)
            .field("embed_api_key", &redact(&self.embed_api_key))
            .field("k", &self.k)
            .field("alpha", &self.alpha)
            .finish_non_exhaustive()
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("environment variable {name} has an invalid value")))
}

impl Config {
    /// Defaults, then `path` if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(path) => Self::from_toml(
                &std::fs::read_to_string(path)
                    .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?,
            )?,
            None => Self::default(),
        };
        config.apply_env(|name| std::env::var(name).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config file: {}", e.message())))
    }

    /// Override fields from `lookup` (variable name → value).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        macro_rules! string {
            ($field:ident, $name:literal) => {
                if let Some(v) = lookup($name) {
                    self.$field = v;
                }
            };
        }
        macro_rules! optional {
            ($field:ident, $name:literal) => {
                if let Some(v) = lookup($name) {
                    self.$field = Some(v).filter(|s| !s.is_empty());
                }
            };
        }
        macro_rules! parsed {
            ($field:ident, $name:literal) => {
                if let Some(v) = lookup($name) {
                    self.$field = parse_env($name, &v)?;
                }
            };
        }
        string!(listen_addr, "LISTEN_ADDR");
        string!(db_path, "DB_PATH");
        if let Some(url) = lookup("DB_URL") {
            self.db_path = url;
        }
        if let Some(root) = lookup("OBJECT_STORE_ROOT") {
            self.object_store_root = root.into();
        }
        optional!(s3_endpoint, "S3_ENDPOINT");
        optional!(s3_bucket, "S3_BUCKET");
        string!(s3_region, "S3_REGION");
        optional!(s3_access_key, "S3_ACCESS_KEY");
        optional!(s3_secret_key, "S3_SECRET_KEY");
        optional!(llm_endpoint, "LLM_ENDPOINT");
        string!(llm_model, "LLM_MODEL");
        optional!(llm_api_key, "LLM_API_KEY");
        parsed!(llm_keywords, "LLM_KEYWORDS");
        if let Some(v) = lookup("EMBED_PROVIDER") {
            self.embed_provider = match v.trim() {
                "local" => EmbedProvider::Local,
                "remote" => EmbedProvider::Remote,
                _ => return Err(Error::InvalidArgument("EMBED_PROVIDER must be local or remote".into())),
            };
        }
        optional!(embed_endpoint, "EMBED_ENDPOINT");
        string!(embed_model, "EMBED_MODEL");
        optional!(embed_api_key, "EMBED_API_KEY");
        parsed!(embed_dims, "EMBED_DIMS");
        optional!(transcript_endpoint, "TRANSCRIPT_ENDPOINT");
        if let Some(dir) = lookup("TRANSCRIPT_FIXTURES") {
            self.transcript_fixtures = Some(dir.into());
        }
        parsed!(max_chunk_words, "MAX_CHUNK_WORDS");
        parsed!(overlap_words, "OVERLAP_WORDS");
        parsed!(k, "RETRIEVAL_K");
        parsed!(alpha, "RETRIEVAL_ALPHA");
        string!(fusion, "RETRIEVAL_FUSION");
        parsed!(refusal_guard, "REFUSAL_GUARD");
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        if self.overlap_words >= self.max_chunk_words {
            return Err(Error::InvalidArgument("overlap_words must be below max_chunk_words".into()));
        }
        if self.embed_dims == 0 {
            return Err(Error::InvalidArgument("embed_dims must be positive".into()));
        }
        self.fusion()?;
        Ok(())
    }

    pub fn fusion(&self) -> Result<Fusion> {
        match self.fusion.as_str() {
            "weighted" => Ok(Fusion::WeightedSum),
            "rrf" => Ok(Fusion::ReciprocalRank { k: DEFAULT_RRF_K }),
            other => Err(Error::InvalidArgument(format!("fusion must be weighted or rrf, got {other}"))),
        }
    }

    pub fn chat_options(&self) -> Result<ChatOptions> {
        let mut options = ChatOptions {
            refusal_guard: self.refusal_guard,
            llm_keywords: self.llm_keywords,
            ..ChatOptions::default()
        };
        options.retrieval.k = self.k;
        options.retrieval.alpha = self.alpha;
        options.retrieval.fusion = self.fusion()?;
        Ok(options)
    }

    pub fn db_file(&self) -> &str {
        self.db_path
            .strip_prefix("sqlite://")
            .or_else(|| self.db_path.strip_prefix("sqlite:"))
            .unwrap_or(&self.db_path)
    }

    pub fn object_store(&self) -> Result<Arc<dyn ObjectStore>> {
        match (&self.s3_endpoint, &self.s3_bucket) {
            (Some(endpoint), Some(bucket)) => Ok(Arc::new(S3Store::new(S3Config {
                endpoint: endpoint.clone(),
                bucket: bucket.clone(),
                region: self.s3_region.clone(),
                access_key: self.s3_access_key.clone().unwrap_or_default(),
                secret_key: self.s3_secret_key.clone().unwrap_or_default(),
            })?)),
            (Some(_), None) | (None, Some(_)) => Err(Error::InvalidArgument(
                "S3 needs both S3_ENDPOINT and S3_BUCKET".into(),
            )),
            (None, None) => Ok(Arc::new(FsStore::new(&self.object_store_root)?)),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>> {
        match self.embed_provider {
            EmbedProvider::Local => Ok(Arc::new(LocalEmbedder::new(self.embed_dims))),
            EmbedProvider::Remote => {
                let endpoint = self
                    .embed_endpoint
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("EMBED_PROVIDER=remote needs EMBED_ENDPOINT".into()))?;
                Ok(Arc::new(RemoteEmbedder::new(
                    endpoint,
                    self.embed_model.clone(),
                    self.embed_api_key.clone(),
                    self.embed_dims,
                )?))
            }
        }
    }

    pub fn llm(&self) -> Result<Option<Arc<dyn LlmClient>>> {
        match &self.llm_endpoint {
            None => Ok(None),
            Some(endpoint) => Ok(Some(Arc::new(HttpLlmClient::new(
                endpoint.clone(),
                self.llm_model.clone(),
                self.llm_api_key.clone(),
            )?))),
        }
    }

    pub fn transcripts(&self) -> Result<Arc<dyn TranscriptProvider>> {
        if let Some(dir) = &self.transcript_fixtures {
            return Ok(Arc::new(FixtureTranscriptProvider::new(dir)));
        }
        let base = self.transcript_endpoint.clone().unwrap_or_else(|| "http://127.0.0.1:8090".into());
        Ok(Arc::new(HttpTranscriptProvider::new(base)?))
    }

    /// Open every backend and assemble the platform. Payments use the
    /// deterministic stub gateway.
    pub fn build_platform(&self) -> Result<Platform> {
        self.validate()?;
        let db = Db::open(self.db_file())?;
        let mut platform = Platform::new(
            db,
            self.object_store()?,
            self.embedder()?,
            self.llm()?,
            self.transcripts()?,
            Arc::new(StubGateway::new()),
        );
        platform.chunk_params = ChunkParams {
            max_chunk_words: self.max_chunk_words,
            overlap_words: self.overlap_words,
        };
        platform.chat = self.chat_options()?;
        Ok(platform)
    }
}
