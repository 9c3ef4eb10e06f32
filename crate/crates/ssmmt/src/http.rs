//! HTTP image-search adapter.
//!
//! The endpoint is queried as `GET <endpoint>?q=<keyword>&count=<k>` with the
//! key from `SSMMT_SEARCH_KEY` in an `X-Api-Key` header, and must answer
//! `{"results": [{"url": "..."}]}` in relevance order. Each result URL is then
//! fetched for the image bytes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::Deserialize;
use ssmmt_core::retrieval::SearchClient;
use ssmmt_core::Error as CoreError;

pub const KEY_ENV: &str = "SSMMT_SEARCH_KEY";
/// When set to a non-empty value, no HTTP request is ever attempted.
pub const DENY_ENV: &str = "SSMMT_DENY_NETWORK";
pub const ATTEMPTS: u32 = 3;

static REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// HTTP requests attempted by this process so far.
pub fn request_count() -> usize {
    REQUESTS.load(Ordering::SeqCst)
}

pub trait Transport {
    fn get(&self, url: &str, query: &[(String, String)], headers: &[(String, String)]) -> Result<Vec<u8>, String>;
}

/// Blocking transport over `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { agent: config.into() }
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str, query: &[(String, String)], headers: &[(String, String)]) -> Result<Vec<u8>, String> {
        if std::env::var_os(DENY_ENV).is_some_and(|v| !v.is_empty()) {
            return Err(format!("network access denied by {DENY_ENV}"));
        }
        REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.get(url);
        for (k, v) in query {
            req = req.query(k, v);
        }
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let mut resp = req.call().map_err(|e| e.to_string())?;
        resp.body_mut().read_to_vec().map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
struct SearchResponse {
    results: Vec<SearchResult>,
}

#[derive(Deserialize)]
struct SearchResult {
    url: String,
}

pub struct HttpClient {
    pub endpoint: String,
    key: Option<String>,
    transport: Box<dyn Transport>,
    backoff: Duration,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, transport: Box<dyn Transport>) -> Self {
        Self { endpoint: endpoint.into(), key, transport, backoff: Duration::from_millis(250) }
    }

    /// Reads the key from the environment and talks real HTTP.
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        let key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(endpoint, key, Box::new(UreqTransport::new(Duration::from_secs(30))))
    }

    /// Initial retry delay; doubled after every failed attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn once(&self, keyword: &str, k: usize) -> Result<Vec<(Vec<u8>, String)>, String> {
        let headers: Vec<(String, String)> = self.key.iter().map(|k| ("X-Api-Key".to_string(), k.clone())).collect();
        let query = [("q".to_string(), keyword.to_string()), ("count".to_string(), k.to_string())];
        let body = self.transport.get(&self.endpoint, &query, &headers)?;
        let parsed: SearchResponse = serde_json::from_slice(&body).map_err(|e| format!("bad search response: {e}"))?;
        let mut out = Vec::new();
        for r in parsed.results.into_iter().take(k) {
            let bytes = self.transport.get(&r.url, &[], &headers)?;
            out.push((bytes, r.url));
        }
        Ok(out)
    }
}

impl SearchClient for HttpClient {
    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn fetch(&mut self, keyword: &str, k: usize) -> ssmmt_core::Result<Vec<(Vec<u8>, String)>> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=ATTEMPTS {
            match self.once(keyword, k) {
                Ok(r) => return Ok(r),
                Err(e) => last = e,
            }
            if attempt < ATTEMPTS {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(CoreError::Search { keyword: keyword.to_string(), attempts: ATTEMPTS, message: last })
    }
}
