//! Chat-completions client with a content-addressed response cache, a
//! deterministic mock mode and a network-free replay mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "FIFA_API_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChatError {
    #[error("request timed out after {0} attempt(s)")]
    Timeout(u32),
    #[error("rate limited after {0} attempt(s)")]
    RateLimited(u32),
    #[error("authentication failed (status {0})")]
    AuthFailure(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("server error {0}")]
    Server(u16),
    #[error("replay cache has no entry {0}")]
    CacheMiss(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("cache io: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    #[default]
    Mock,
    Replay,
}

impl FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(BackendMode::Live),
            "mock" => Ok(BackendMode::Mock),
            "replay" => Ok(BackendMode::Replay),
            _ => Err(format!("unknown backend mode {s:?} (expected live, mock or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_s: u64,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: BackendMode::Mock,
            endpoint: None,
            model: "gpt-4o".into(),
            api_key_env: API_KEY_ENV.into(),
            max_retries: 4,
            backoff_base_ms: 500,
            timeout_s: 120,
            cache_dir: None,
            max_in_flight: 4,
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
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// One HTTP round trip. Implementations must not retry.
pub trait Transport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<TransportResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: String,
}

impl UreqTransport {
    pub fn new(endpoint: &str, token: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent, endpoint: endpoint.to_string(), token: token.to_string() }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, body: &Value) -> Result<TransportResponse, TransportError> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(body);
        match resp {
            Ok(mut r) => {
                let status = r.status().as_u16();
                let body = r.body_mut().read_to_string().map_err(|e| TransportError::Other(e.to_string()))?;
                Ok(TransportResponse { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout),
            Err(e) => Err(TransportError::Other(e.to_string())),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the message list as sent.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    sha256_hex(serde_json::to_string(messages).expect("messages serialize").as_bytes())
}

/// Deterministic responder for mock mode: exact answers keyed by prompt hash,
/// otherwise a generated answer that follows the requested output format.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub canned: BTreeMap<String, String>,
}

const MOCK_SENTENCES: [&str; 6] = [
    "shows an unnaturally smooth texture that differs from the surrounding skin.",
    "has blurred boundaries where the blending with nearby regions is visible.",
    "exhibits lighting that is inconsistent with the rest of the face.",
    "contains color shifts that do not match the neighbouring areas.",
    "appears distorted, with shapes that look slightly warped.",
    "lacks the fine detail expected at this resolution.",
];

impl MockScript {
    pub fn with(mut self, prompt_hash: &str, answer: &str) -> Self {
        self.canned.insert(prompt_hash.to_string(), answer.to_string());
        self
    }

    pub fn respond(&self, messages: &[ChatMessage]) -> String {
        if let Some(a) = self.canned.get(&prompt_hash(messages)) {
            return a.clone();
        }
        let prompt = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        if let Some(areas) = step3_areas(prompt) {
            return areas
                .iter()
                .map(|a| format!("{a}: The {a} {}", pick(a, &MOCK_SENTENCES)))
                .collect::<Vec<_>>()
                .join("\n");
        }
        if let Some(items) = step4_items(prompt) {
            let parts: Vec<String> = items
                .iter()
                .map(|(area, i)| format!("the <{i}> {area} </{i}> {}", pick(area, &MOCK_SENTENCES).trim_end_matches('.')))
                .collect();
            let mut s = String::from("In this image, ");
            s.push_str(&parts.join("; "));
            s.push('.');
            return s;
        }
        "The image shows signs of manipulation.".to_string()
    }
}

fn pick<'a>(key: &str, items: &[&'a str]) -> &'a str {
    let h = Sha256::digest(key.as_bytes());
    items[h[0] as usize % items.len()]
}

fn step3_areas(prompt: &str) -> Option<Vec<String>> {
    let start = prompt.find("MUST be discussed:\n")? + "MUST be discussed:\n".len();
    let end = prompt[start..].find("\nPlease analyze each area")? + start;
    Some(prompt[start..end].lines().map(str::to_string).collect())
}

fn step4_items(prompt: &str) -> Option<Vec<(String, usize)>> {
    let input = &prompt[prompt.rfind("Input:")?..];
    let idx = &input[input.find("Index Numbers\n")? + "Index Numbers\n".len()..];
    let items: Vec<(String, usize)> = idx
        .lines()
        .map_while(|l| {
            let (a, i) = l.rsplit_once(": ")?;
            Some((a.to_string(), i.trim().parse().ok()?))
        })
        .collect();
    (!items.is_empty()).then_some(items)
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model: String,
    prompt_hash: String,
    image_hashes: Vec<String>,
    response: String,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) {
        let mut n = self.free.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore wait");
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.free.lock().expect("semaphore lock") += 1;
        self.cv.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct ChatClient {
    config: BackendConfig,
    transport: Option<Box<dyn Transport>>,
    mock: MockScript,
    sleeper: Sleeper,
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
    in_flight: Semaphore,
    key_locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl ChatClient {
    /// Builds a client for the configured mode. Live mode needs an endpoint
    /// and a token in the configured environment variable.
    pub fn new(config: BackendConfig) -> Result<Self, ChatError> {
        let transport: Option<Box<dyn Transport>> = match config.mode {
            BackendMode::Live => {
                let endpoint = config.endpoint.clone().ok_or_else(|| ChatError::Config("live mode needs an endpoint".into()))?;
                let token = std::env::var(&config.api_key_env)
                    .map_err(|_| ChatError::Config(format!("live mode needs ${}", config.api_key_env)))?;
                Some(Box::new(UreqTransport::new(&endpoint, &token, Duration::from_secs(config.timeout_s))))
            }
            _ => None,
        };
        Ok(Self::assemble(config, transport))
    }

    /// Live-mode client over a caller-supplied transport.
    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        Self::assemble(BackendConfig { mode: BackendMode::Live, ..config }, Some(transport))
    }

    fn assemble(config: BackendConfig, transport: Option<Box<dyn Transport>>) -> Self {
        let slots = config.max_in_flight.max(1);
        ChatClient {
            config,
            transport,
            mock: MockScript::default(),
            sleeper: Arc::new(std::thread::sleep),
            network_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            in_flight: Semaphore { free: Mutex::new(slots), cv: Condvar::new() },
            key_locks: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_mock(mut self, mock: MockScript) -> Self {
        self.mock = mock;
        self
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Cache key over model, prompt hash and image content hashes.
    pub fn cache_key(&self, messages: &[ChatMessage], images: &[Vec<u8>]) -> String {
        let image_hashes: Vec<String> = images.iter().map(|i| sha256_hex(i)).collect();
        let k = json!({"model": self.config.model, "prompt": prompt_hash(messages), "images": image_hashes});
        sha256_hex(k.to_string().as_bytes())
    }

    /// Sends messages with PNG images attached to the last message and returns
    /// the assistant text.
    pub fn chat(&self, messages: &[ChatMessage], images: &[Vec<u8>]) -> Result<String, ChatError> {
        let key = self.cache_key(messages, images);
        let lock = {
            let mut locks = self.key_locks.lock().expect("key lock map");
            locks.entry(key.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("key lock");
        if let Some(hit) = self.cache_read(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let response = match self.config.mode {
            BackendMode::Replay => return Err(ChatError::CacheMiss(key)),
            BackendMode::Mock => self.mock.respond(messages),
            BackendMode::Live => self.live(messages, images)?,
        };
        let entry = CacheEntry {
            key: key.clone(),
            model: self.config.model.clone(),
            prompt_hash: prompt_hash(messages),
            image_hashes: images.iter().map(|i| sha256_hex(i)).collect(),
            response: response.clone(),
        };
        self.cache_write(&key, &entry)?;
        Ok(response)
    }

    fn live(&self, messages: &[ChatMessage], images: &[Vec<u8>]) -> Result<String, ChatError> {
        let transport = self.transport.as_ref().ok_or_else(|| ChatError::Config("no transport".into()))?;
        let body = request_body(&self.config.model, messages, images);
        let mut attempt = 0u32;
        loop {
            self.in_flight.acquire();
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let result = transport.post_json(&body);
            self.in_flight.release();
            let retryable = match result {
                Ok(r) if r.status == 200 => return extract_content(&r.body),
                Ok(r) if r.status == 401 || r.status == 403 => return Err(ChatError::AuthFailure(r.status)),
                Ok(r) if r.status == 429 => ChatError::RateLimited(attempt + 1),
                Ok(r) if r.status >= 500 => ChatError::Server(r.status),
                Ok(r) => return Err(ChatError::MalformedResponse(format!("status {}", r.status))),
                Err(TransportError::Timeout) => ChatError::Timeout(attempt + 1),
                Err(TransportError::Other(e)) => return Err(ChatError::Transport(e)),
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            let delay = self.config.backoff_base_ms.saturating_mul(1 << attempt.min(20));
            log::warn!("chat attempt {} failed ({retryable}); retrying in {delay} ms", attempt + 1);
            (self.sleeper)(Duration::from_millis(delay));
            attempt += 1;
        }
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn cache_read(&self, key: &str) -> Result<Option<String>, ChatError> {
        let Some(path) = self.cache_path(key) else { return Ok(None) };
        match fs::read_to_string(&path) {
            Ok(text) => {
                let e: CacheEntry = serde_json::from_str(&text).map_err(|e| ChatError::Cache(format!("{}: {e}", path.display())))?;
                Ok(Some(e.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ChatError::Cache(e.to_string())),
        }
    }

    fn cache_write(&self, key: &str, entry: &CacheEntry) -> Result<(), ChatError> {
        let Some(path) = self.cache_path(key) else { return Ok(()) };
        write_atomic(&path, serde_json::to_string_pretty(entry).expect("entry serializes").as_bytes())
            .map_err(|e| ChatError::Cache(e.to_string()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Chat-completions request; images go into the last message as base64 PNG
/// data URLs.
pub fn request_body(model: &str, messages: &[ChatMessage], images: &[Vec<u8>]) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD;
    let last = messages.len().saturating_sub(1);
    let msgs: Vec<Value> = messages
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if i == last && !images.is_empty() {
                let mut parts = vec![json!({"type": "text", "text": m.content})];
                for img in images {
                    let url = format!("data:image/png;base64,{}", b64.encode(img));
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                json!({"role": m.role, "content": parts})
            } else {
                json!({"role": m.role, "content": m.content})
            }
        })
        .collect();
    json!({"model": model, "messages": msgs, "temperature": 0})
}

fn extract_content(body: &str) -> Result<String, ChatError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ChatError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ChatError::MalformedResponse("missing choices[0].message.content".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plays back a fixed list of outcomes and records request bodies.
    struct Scripted {
        outcomes: Mutex<Vec<Result<TransportResponse, TransportError>>>,
        seen: Arc<Mutex<Vec<Value>>>,
    }

    impl Transport for Scripted {
        fn post_json(&self, body: &Value) -> Result<TransportResponse, TransportError> {
            self.seen.lock().unwrap().push(body.clone());
            self.outcomes.lock().unwrap().remove(0)
        }
    }

    fn ok(text: &str) -> Result<TransportResponse, TransportError> {
        Ok(TransportResponse { status: 200, body: json!({"choices": [{"message": {"content": text}}]}).to_string() })
    }

    fn status(code: u16) -> Result<TransportResponse, TransportError> {
        Ok(TransportResponse { status: code, body: String::new() })
    }

    fn scripted(outcomes: Vec<Result<TransportResponse, TransportError>>, max_retries: u32) -> (ChatClient, Arc<Mutex<Vec<Duration>>>, Arc<Mutex<Vec<Value>>>) {
        let seen = Arc::new(Mutex::new(vec![]));
        let t = Scripted { outcomes: Mutex::new(outcomes), seen: seen.clone() };
        let delays = Arc::new(Mutex::new(vec![]));
        let d = delays.clone();
        let cfg = BackendConfig { max_retries, backoff_base_ms: 100, ..Default::default() };
        let c = ChatClient::with_transport(cfg, Box::new(t)).with_sleeper(move |dur| d.lock().unwrap().push(dur));
        (c, delays, seen)
    }

    #[test]
    fn retries_rate_limits_with_exponential_backoff() {
        let (c, delays, _) = scripted(vec![status(429), status(429), ok("fine")], 4);
        assert_eq!(c.chat(&[ChatMessage::user("hi")], &[]).unwrap(), "fine");
        assert_eq!(c.network_calls(), 3);
        assert_eq!(*delays.lock().unwrap(), vec![Duration::from_millis(100), Duration::from_millis(200)]);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (c, _, _) = scripted(vec![Err(TransportError::Timeout), Err(TransportError::Timeout), status(429)], 2);
        assert_eq!(c.chat(&[ChatMessage::user("hi")], &[]), Err(ChatError::RateLimited(3)));
        let (c, _, _) = scripted(vec![Err(TransportError::Timeout), Err(TransportError::Timeout)], 1);
        assert_eq!(c.chat(&[ChatMessage::user("hi")], &[]), Err(ChatError::Timeout(2)));
    }

    #[test]
    fn auth_and_malformed_are_not_retried() {
        let (c, _, _) = scripted(vec![status(401)], 3);
        assert_eq!(c.chat(&[ChatMessage::user("a")], &[]), Err(ChatError::AuthFailure(401)));
        assert_eq!(c.network_calls(), 1);
        let (c, _, _) = scripted(vec![Ok(TransportResponse { status: 200, body: "{}".into() })], 3);
        assert!(matches!(c.chat(&[ChatMessage::user("a")], &[]), Err(ChatError::MalformedResponse(_))));
    }

    #[test]
    fn images_travel_as_data_urls() {
        let (c, _, seen) = scripted(vec![ok("x")], 0);
        c.chat(&[ChatMessage::user("look")], &[vec![1, 2, 3]]).unwrap();
        let body = seen.lock().unwrap()[0].clone();
        assert_eq!(body.pointer("/messages/0/content/1/image_url/url").unwrap(), "data:image/png;base64,AQID");
        assert_eq!(body.pointer("/messages/0/content/0/text").unwrap(), "look");
    }

    #[test]
    fn cache_then_replay_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackendConfig { cache_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let (c, _, _) = scripted(vec![ok("cached answer")], 0);
        let c = ChatClient { config: BackendConfig { mode: BackendMode::Live, ..cfg.clone() }, ..c };
        let msgs = [ChatMessage::user("q")];
        assert_eq!(c.chat(&msgs, &[vec![9]]).unwrap(), "cached answer");
        assert_eq!(c.chat(&msgs, &[vec![9]]).unwrap(), "cached answer");
        assert_eq!((c.network_calls(), c.cache_hits()), (1, 1));
        let key = c.cache_key(&msgs, &[vec![9]]);
        assert!(dir.path().join(format!("{key}.json")).exists());

        let replay = ChatClient::new(BackendConfig { mode: BackendMode::Replay, ..cfg }).unwrap();
        assert_eq!(replay.chat(&msgs, &[vec![9]]).unwrap(), "cached answer");
        assert!(matches!(replay.chat(&msgs, &[vec![8]]), Err(ChatError::CacheMiss(_))));
        assert_eq!(replay.network_calls(), 0);
    }

    #[test]
    fn mock_is_deterministic_and_follows_formats() {
        let c = ChatClient::new(BackendConfig::default()).unwrap();
        let p3 = crate::explain::build_step3_prompt(&["neck", "left earring"]).unwrap();
        let a = c.chat(&[ChatMessage::user(p3.clone())], &[]).unwrap();
        assert_eq!(a, c.chat(&[ChatMessage::user(p3)], &[]).unwrap());
        assert!(a.starts_with("neck: "));
        assert!(a.contains("\nleft earring: "));
        let canned = MockScript::default().with(&prompt_hash(&[ChatMessage::user("x")]), "echo");
        let c = ChatClient::new(BackendConfig::default()).unwrap().with_mock(canned);
        assert_eq!(c.chat(&[ChatMessage::user("x")], &[]).unwrap(), "echo");
        assert_eq!(c.network_calls(), 0);
    }

    #[test]
    fn live_mode_needs_endpoint() {
        let cfg = BackendConfig { mode: BackendMode::Live, ..Default::default() };
        assert!(matches!(ChatClient::new(cfg), Err(ChatError::Config(_))));
        assert_eq!("replay".parse::<BackendMode>(), Ok(BackendMode::Replay));
    }
}
