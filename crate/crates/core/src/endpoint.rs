//! Chat-completion and news-search endpoints, with record/replay transcripts.
//!
//! Every request carries a `scope` (the question id) and a `tag` naming the
//! call site (`news/queries`, `selfplay/attempt-2`, ...). Neither is sent over
//! the wire; together with the request body they form the transcript key, so
//! repeated sampling of the same prompt maps to distinct recorded responses.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{sha256_hex, write_atomic};

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("no recorded response for {scope} [{tag}] (key {key})")]
    MissingTranscript { scope: String, tag: String, key: String },
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EndpointError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            EndpointError::Timeout | EndpointError::Transport(_) => true,
            EndpointError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Exponential backoff: `base_delay * 2^k` before retry `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub attempts: u32,
    #[serde(with = "secs_f64")]
    pub base_delay: Duration,
    #[serde(with = "secs_f64")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay_before(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, what: &str, mut op: impl FnMut() -> Result<T, EndpointError>) -> Result<T, EndpointError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self.delay_before(attempt);
                    warn!("{what}: attempt {attempt}/{attempts} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub scope: String,
    pub tag: String,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn transcript_key(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("chat request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Generation stopped at the token budget.
    #[serde(default)]
    pub truncated: bool,
}

pub trait ChatEndpoint: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsArticle {
    pub source: String,
    pub published_at: DateTime<Utc>,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsQuery {
    pub scope: String,
    pub query: String,
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub max_results: usize,
}

impl NewsQuery {
    pub fn transcript_key(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("news query serializes"))
    }
}

pub trait NewsEndpoint: Send + Sync {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError>;
}

/// Reads an API key from the named environment variable.
pub fn api_key_from_env(var: &str) -> Result<String, EndpointError> {
    std::env::var(var)
        .ok()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| EndpointError::MissingApiKey(var.to_string()))
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn map_ureq(e: ureq::Error) -> EndpointError {
    match e {
        ureq::Error::Timeout(_) => EndpointError::Timeout,
        ureq::Error::Io(io) if io.kind() == io::ErrorKind::TimedOut => EndpointError::Timeout,
        other => EndpointError::Transport(other.to_string()),
    }
}

fn read_body(mut resp: ureq::http::Response<ureq::Body>) -> Result<String, EndpointError> {
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().map_err(map_ureq)?;
    if !(200..300).contains(&status) {
        return Err(EndpointError::Http { status, body });
    }
    Ok(body)
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpChatEndpoint {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpChatEndpoint {
    pub fn new(base_url: &str, api_key: String, timeout: Duration, retry: RetryPolicy) -> Self {
        HttpChatEndpoint {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            agent: agent(timeout),
            retry,
        }
    }

    fn once(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        #[derive(Serialize)]
        struct Body<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            max_tokens: Option<u32>,
        }
        #[derive(Deserialize)]
        struct Completion {
            choices: Vec<Choice>,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: ChatMessage,
            finish_reason: Option<String>,
        }

        let resp = self
            .agent
            .post(format!("{}/chat/completions", self.base_url))
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(Body {
                model: &req.model,
                messages: &req.messages,
                temperature: req.temperature,
                max_tokens: req.max_tokens,
            })
            .map_err(map_ureq)?;
        let body = read_body(resp)?;
        let completion: Completion = serde_json::from_str(&body).map_err(|e| EndpointError::Decode(e.to_string()))?;
        let choice = completion
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| EndpointError::Decode("no choices in completion".into()))?;
        Ok(ChatResponse {
            text: choice.message.content,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}

impl ChatEndpoint for HttpChatEndpoint {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        self.retry.run(&format!("chat {} [{}]", req.scope, req.tag), || self.once(req))
    }
}

/// Generic news search over HTTP: `GET {base_url}?q=..&from=..&to=..&page_size=..`
/// with the API key in a configurable header. The response must hold an
/// `articles` array; common field spellings are accepted.
pub struct HttpNewsEndpoint {
    base_url: String,
    key_header: String,
    api_key: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpNewsEndpoint {
    pub fn new(base_url: &str, key_header: &str, api_key: String, timeout: Duration, retry: RetryPolicy) -> Self {
        HttpNewsEndpoint {
            base_url: base_url.to_string(),
            key_header: key_header.to_string(),
            api_key,
            agent: agent(timeout),
            retry,
        }
    }

    fn once(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        #[derive(Deserialize)]
        struct Page {
            #[serde(default)]
            articles: Vec<WireArticle>,
        }
        #[derive(Deserialize)]
        struct WireArticle {
            #[serde(alias = "clean_url", alias = "domain", default)]
            source: String,
            #[serde(alias = "published_date", alias = "publishedAt")]
            published_at: String,
            #[serde(default)]
            title: String,
            #[serde(alias = "summary", alias = "excerpt", alias = "content", default)]
            body: String,
        }

        let resp = self
            .agent
            .get(&self.base_url)
            .header(self.key_header.as_str(), self.api_key.as_str())
            .query("q", &q.query)
            .query("from", q.from.to_string())
            .query("to", q.to.to_string())
            .query("page_size", q.max_results.to_string())
            .call()
            .map_err(map_ureq)?;
        let body = read_body(resp)?;
        let page: Page = serde_json::from_str(&body).map_err(|e| EndpointError::Decode(e.to_string()))?;
        let mut out = Vec::with_capacity(page.articles.len());
        for a in page.articles {
            let Some(published_at) = parse_timestamp(&a.published_at) else {
                warn!("dropping article {:?} with unparsable date {:?}", a.title, a.published_at);
                continue;
            };
            out.push(NewsArticle {
                source: a.source,
                published_at,
                title: a.title,
                body: a.body,
            });
        }
        Ok(out)
    }
}

/// RFC 3339, `YYYY-MM-DD HH:MM:SS` (taken as UTC) or a bare date.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Some(dt.and_utc());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc())
}

impl NewsEndpoint for HttpNewsEndpoint {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        self.retry.run(&format!("news {} {:?}", q.scope, q.query), || self.once(q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptEntry {
    tag: String,
    response: serde_json::Value,
}

type ScopeFile = BTreeMap<String, TranscriptEntry>;

/// Directory of per-scope JSON files mapping request key to response.
#[derive(Debug)]
pub struct TranscriptStore {
    dir: PathBuf,
    cache: Mutex<BTreeMap<String, ScopeFile>>,
}

impl TranscriptStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TranscriptStore {
            dir: dir.into(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file_for(&self, scope: &str) -> PathBuf {
        let safe: String = scope
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}.json"))
    }

    fn with_scope<R>(&self, scope: &str, f: impl FnOnce(&mut ScopeFile) -> R) -> io::Result<R> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if !cache.contains_key(scope) {
            let path = self.file_for(scope);
            let file = match fs::read(&path) {
                Ok(bytes) => serde_json::from_slice(&bytes).map_err(io::Error::other)?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => ScopeFile::new(),
                Err(e) => return Err(e),
            };
            cache.insert(scope.to_string(), file);
        }
        Ok(f(cache.get_mut(scope).expect("inserted above")))
    }

    pub fn get<T: DeserializeOwned>(&self, scope: &str, key: &str) -> io::Result<Option<T>> {
        let v = self.with_scope(scope, |f| f.get(key).map(|e| e.response.clone()))?;
        v.map(|v| serde_json::from_value(v).map_err(io::Error::other)).transpose()
    }

    /// Inserts and rewrites the scope file.
    pub fn put<T: Serialize>(&self, scope: &str, key: &str, tag: &str, response: &T) -> io::Result<()> {
        let response = serde_json::to_value(response).map_err(io::Error::other)?;
        let bytes = self.with_scope(scope, |f| {
            f.insert(
                key.to_string(),
                TranscriptEntry {
                    tag: tag.to_string(),
                    response,
                },
            );
            serde_json::to_vec_pretty(f)
        })?;
        let mut bytes = bytes.map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&self.file_for(scope), &bytes)
    }
}

/// Serves chat responses from a transcript directory; never touches the
/// network.
pub struct ReplayChat(pub TranscriptStore);

impl ChatEndpoint for ReplayChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        let key = req.transcript_key();
        self.0
            .get(&req.scope, &key)?
            .ok_or_else(|| EndpointError::MissingTranscript {
                scope: req.scope.clone(),
                tag: req.tag.clone(),
                key,
            })
    }
}

/// Forwards to an inner endpoint and records every successful response.
pub struct RecordingChat<E> {
    pub inner: E,
    pub store: TranscriptStore,
}

impl<E: ChatEndpoint> ChatEndpoint for RecordingChat<E> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        let resp = self.inner.complete(req)?;
        self.store.put(&req.scope, &req.transcript_key(), &req.tag, &resp)?;
        Ok(resp)
    }
}

pub struct ReplayNews(pub TranscriptStore);

impl NewsEndpoint for ReplayNews {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        let key = q.transcript_key();
        self.0
            .get(&q.scope, &key)?
            .ok_or_else(|| EndpointError::MissingTranscript {
                scope: q.scope.clone(),
                tag: format!("news/search {:?}", q.query),
                key,
            })
    }
}

pub struct RecordingNews<E> {
    pub inner: E,
    pub store: TranscriptStore,
}

impl<E: NewsEndpoint> NewsEndpoint for RecordingNews<E> {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        let resp = self.inner.search(q)?;
        self.store.put(&q.scope, &q.transcript_key(), "news/search", &resp)?;
        Ok(resp)
    }
}

impl<T: ChatEndpoint + ?Sized> ChatEndpoint for Box<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        (**self).complete(req)
    }
}

impl<T: NewsEndpoint + ?Sized> NewsEndpoint for Box<T> {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        (**self).search(q)
    }
}
