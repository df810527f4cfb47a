//! Outside investigation: a Wikipedia-scoped web search over the extracted
//! keywords, keeping the top-ranked organic result as evidence.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{text_digest, Evidence, KeywordSet};
use crate::llm::{read_jsonl, write_jsonl, FixtureError};

pub const QUERY_PREFIX: &str = "en.wikipedia.org ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("search transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("search backend refused request: {0}")]
    Refused(String),
    #[error("no search fixture for query {0:?}")]
    FixtureMissing(String),
    #[error("search cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub keywords_digest: String,
}

impl SearchQuery {
    pub fn keyword_join(&self) -> &str {
        self.text.strip_prefix(QUERY_PREFIX).unwrap_or(&self.text)
    }
}

/// `en.wikipedia.org` followed by the space-joined keywords.
pub fn build_query(keywords: &KeywordSet) -> SearchQuery {
    let joined = keywords.joined();
    SearchQuery {
        text: format!("{QUERY_PREFIX}{joined}"),
        keywords_digest: text_digest(&joined),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub url: String,
    pub rank: u32,
}

/// Ranked organic results plus the backend's raw payload, kept for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchResult>,
    pub raw: serde_json::Value,
}

impl SearchResponse {
    pub fn top(&self) -> Option<&SearchResult> {
        self.results.iter().min_by_key(|r| r.rank)
    }
}

pub trait SearchClient: Send + Sync {
    fn id(&self) -> String;
    fn search(&self, query: &str) -> Result<SearchResponse, SearchError>;
}

/// One line of a search fixture file. A record with only `query` marks a
/// query that returns no results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchFixture {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl SearchFixture {
    pub fn hit(query: &str, title: &str, snippet: &str, url: &str) -> Self {
        SearchFixture {
            query: query.into(),
            title: Some(title.into()),
            snippet: Some(snippet.into()),
            url: Some(url.into()),
        }
    }

    pub fn empty(query: &str) -> Self {
        SearchFixture {
            query: query.into(),
            title: None,
            snippet: None,
            url: None,
        }
    }

    fn is_result(&self) -> bool {
        self.title.is_some() || self.snippet.is_some() || self.url.is_some()
    }
}

/// Replays search results from fixtures. Unknown queries are an error so a
/// missing fixture never passes silently as "no evidence".
pub struct FixtureSearchClient {
    table: HashMap<String, Vec<SearchFixture>>,
    calls: AtomicU64,
    id: String,
}

impl FixtureSearchClient {
    pub fn new(fixtures: impl IntoIterator<Item = SearchFixture>) -> Self {
        let mut table: HashMap<String, Vec<SearchFixture>> = HashMap::new();
        let mut digest_input = String::new();
        for f in fixtures {
            digest_input.push_str(&serde_json::to_string(&f).expect("fixture serializes"));
            digest_input.push('\n');
            table.entry(f.query.clone()).or_default().push(f);
        }
        FixtureSearchClient {
            table,
            calls: AtomicU64::new(0),
            id: format!("search-fixture:{}", &text_digest(&digest_input)[..16]),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        Ok(FixtureSearchClient::new(read_jsonl::<SearchFixture>(path.as_ref())?))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SearchClient for FixtureSearchClient {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn search(&self, query: &str) -> Result<SearchResponse, SearchError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let records = self
            .table
            .get(query)
            .ok_or_else(|| SearchError::FixtureMissing(query.to_string()))?;
        let hits: Vec<&SearchFixture> = records.iter().filter(|r| r.is_result()).collect();
        let results = hits
            .iter()
            .enumerate()
            .map(|(i, r)| SearchResult {
                title: r.title.clone().unwrap_or_default(),
                snippet: r.snippet.clone().unwrap_or_default(),
                url: r.url.clone().unwrap_or_default(),
                rank: i as u32 + 1,
            })
            .collect();
        Ok(SearchResponse {
            results,
            raw: serde_json::to_value(&hits).expect("fixtures serialize"),
        })
    }
}

/// SerpAPI-shaped live client: `GET endpoint?q=…&engine=google&api_key=…`,
/// reading `organic_results`.
pub struct SerpApiClient {
    endpoint_url: String,
    api_key: String,
    retry_limit: u32,
    base_backoff: Duration,
    agent: ureq::Agent,
}

impl SerpApiClient {
    pub fn new(endpoint_url: impl Into<String>, api_key: impl Into<String>, retry_limit: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        SerpApiClient {
            endpoint_url: endpoint_url.into(),
            api_key: api_key.into(),
            retry_limit,
            base_backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.base_backoff = base;
        self
    }

    fn attempt(&self, query: &str) -> Result<SearchResponse, (bool, String)> {
        let mut resp = self
            .agent
            .get(&self.endpoint_url)
            .query("q", query)
            .query("engine", "google")
            .query("api_key", &self.api_key)
            .call()
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| (true, e.to_string()))?;
        if !(200..300).contains(&status) {
            let retryable = status == 408 || status == 429 || status >= 500;
            return Err((retryable, format!("HTTP {status}")));
        }
        parse_serpapi_response(&body).map_err(|m| (false, m))
    }
}

/// Organic results in rank order; the snippet falls back to the title.
pub fn parse_serpapi_response(body: &str) -> Result<SearchResponse, String> {
    let raw: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("invalid JSON from search endpoint: {e}"))?;
    if let Some(err) = raw["error"].as_str() {
        // SerpAPI reports an empty result page as an error string.
        if err.contains("hasn't returned any results") {
            return Ok(SearchResponse { results: vec![], raw });
        }
        return Err(err.to_string());
    }
    let mut results: Vec<SearchResult> = raw["organic_results"]
        .as_array()
        .map(|items| {
            items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let title = item["title"].as_str().unwrap_or_default().to_string();
                    let snippet = item["snippet"]
                        .as_str()
                        .filter(|s| !s.trim().is_empty())
                        .map(str::to_string)
                        .unwrap_or_else(|| title.clone());
                    SearchResult {
                        title,
                        snippet,
                        url: item["link"].as_str().unwrap_or_default().to_string(),
                        rank: item["position"].as_u64().map(|p| p as u32).unwrap_or(i as u32 + 1),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    results.sort_by_key(|r| r.rank);
    Ok(SearchResponse { results, raw })
}

impl SearchClient for SerpApiClient {
    fn id(&self) -> String {
        format!("serpapi:{}", self.endpoint_url)
    }

    fn search(&self, query: &str) -> Result<SearchResponse, SearchError> {
        let mut attempt = 0;
        loop {
            match self.attempt(query) {
                Ok(r) => return Ok(r),
                Err((true, message)) if attempt < self.retry_limit => {
                    log::warn!("search failed ({message}); retry {}/{}", attempt + 1, self.retry_limit);
                    std::thread::sleep(self.base_backoff.saturating_mul(1 << attempt.min(16)));
                    attempt += 1;
                }
                Err((true, message)) => {
                    return Err(SearchError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err((false, message)) => return Err(SearchError::Refused(message)),
            }
        }
    }
}

/// Records every live response as fixtures for offline replay.
pub struct RecordingSearchClient {
    inner: Arc<dyn SearchClient>,
    recorded: Mutex<Vec<SearchFixture>>,
}

impl RecordingSearchClient {
    pub fn new(inner: Arc<dyn SearchClient>) -> Self {
        RecordingSearchClient {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn write_fixtures(&self, path: impl AsRef<Path>) -> std::io::Result<usize> {
        let recorded = self.recorded.lock().unwrap();
        write_jsonl(path.as_ref(), &recorded)?;
        Ok(recorded.len())
    }
}

impl SearchClient for RecordingSearchClient {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn search(&self, query: &str) -> Result<SearchResponse, SearchError> {
        let response = self.inner.search(query)?;
        let mut recorded = self.recorded.lock().unwrap();
        if recorded.iter().any(|f| f.query == query) {
            return Ok(response);
        }
        if response.results.is_empty() {
            recorded.push(SearchFixture::empty(query));
        }
        for r in &response.results {
            recorded.push(SearchFixture::hit(query, &r.title, &r.snippet, &r.url));
        }
        Ok(response)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    query: String,
    response: SearchResponse,
}

/// Query-text-keyed cache in front of a search client: in memory, plus an
/// optional directory of one JSON file per query digest written atomically.
pub struct CachedSearch {
    client: Arc<dyn SearchClient>,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, SearchResponse>>,
    misses: AtomicU64,
}

impl CachedSearch {
    pub fn new(client: Arc<dyn SearchClient>, dir: Option<PathBuf>) -> Self {
        CachedSearch {
            client,
            dir,
            memory: Mutex::new(HashMap::new()),
            misses: AtomicU64::new(0),
        }
    }

    pub fn client_id(&self) -> String {
        self.client.id()
    }

    /// Number of lookups that reached the underlying client.
    pub fn client_calls(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    fn path_for(&self, query: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", text_digest(query))))
    }

    pub fn fetch(&self, query: &str) -> Result<SearchResponse, SearchError> {
        if let Some(hit) = self.memory.lock().unwrap().get(query) {
            return Ok(hit.clone());
        }
        if let Some(path) = self.path_for(query) {
            if let Ok(text) = std::fs::read_to_string(&path) {
                match serde_json::from_str::<CacheRecord>(&text) {
                    Ok(rec) if rec.query == query => {
                        self.memory.lock().unwrap().insert(query.to_string(), rec.response.clone());
                        return Ok(rec.response);
                    }
                    _ => log::warn!("ignoring unreadable search cache file {}", path.display()),
                }
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.client.search(query)?;
        if let Some(path) = self.path_for(query) {
            let record = CacheRecord {
                query: query.to_string(),
                response: response.clone(),
            };
            write_atomic(&path, serde_json::to_string_pretty(&record).expect("record serializes").as_bytes())
                .map_err(|e| SearchError::Cache(format!("{}: {e}", path.display())))?;
        }
        self.memory.lock().unwrap().insert(query.to_string(), response.clone());
        Ok(response)
    }
}

/// Writes to a temp file in the target directory, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Issues the query and keeps the rank-1 result. No results yields the empty
/// evidence sentinel, not an error.
pub fn search(query: &SearchQuery, client: &CachedSearch) -> Result<Evidence, SearchError> {
    let response = client.fetch(&query.text)?;
    Ok(match response.top() {
        Some(top) => Evidence {
            snippet: top.snippet.clone(),
            source_title: Some(top.title.clone()).filter(|t| !t.is_empty()),
            source_url: Some(top.url.clone()).filter(|u| !u.is_empty()),
            query_used: query.text.clone(),
        },
        None => Evidence::empty(&query.text),
    })
}
