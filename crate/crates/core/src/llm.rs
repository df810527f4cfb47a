//! Chat-model gateway: one entry point for every model call in the pipeline.
//!
//! The [`Gateway`] owns a [`ChatBackend`] (live chat-completions endpoint,
//! replay mock, or anything a caller implements), applies sampling defaults,
//! retries transient failures with exponential backoff and keeps a per-stage
//! [`CallLedger`].

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::text_digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Detection,
    InsideJudge,
    OutsideJudge,
    Determination,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::Detection,
        StageTag::InsideJudge,
        StageTag::OutsideJudge,
        StageTag::Determination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Detection => "detection",
            StageTag::InsideJudge => "inside_judge",
            StageTag::OutsideJudge => "outside_judge",
            StageTag::Determination => "determination",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub do_sample: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.70,
            top_k: 50,
            top_p: 0.95,
            max_new_tokens: 256,
            do_sample: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.top_k == 0 {
            return Err("top_k must be positive".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub prompt: String,
    pub sampling: SamplingConfig,
    pub stage_tag: StageTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend refused the request (status {status:?}): {message}")]
    Refused { status: Option<u16>, message: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }

    /// Classifies an HTTP status: 408, 429 and 5xx are transient.
    pub fn from_status(status: u16, body: &str) -> BackendError {
        let message = format!("HTTP {status}: {}", truncate_for_log(body));
        if status == 408 || status == 429 || status >= 500 {
            BackendError::Transport(message)
        } else {
            BackendError::Refused {
                status: Some(status),
                message,
            }
        }
    }
}

fn truncate_for_log(s: &str) -> &str {
    match s.char_indices().nth(300) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Error returned by [`Gateway::complete`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("model transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("model backend refused request: {0}")]
    BackendRefused(String),
    #[error("empty prompt")]
    EmptyPrompt,
}

/// Something that turns a prompt into a completion. One call is one attempt;
/// retries live in the gateway.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn call(&self, request: &ModelRequest) -> Result<String, BackendError>;
}

/// Request, retry and failure counts for one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub requests: u64,
    pub retries: u64,
    pub failures: u64,
}

/// Point-in-time copy of the gateway's call counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub detection: StageCounters,
    pub inside_judge: StageCounters,
    pub outside_judge: StageCounters,
    pub determination: StageCounters,
}

impl CallLedger {
    pub fn stage(&self, tag: StageTag) -> StageCounters {
        match tag {
            StageTag::Detection => self.detection,
            StageTag::InsideJudge => self.inside_judge,
            StageTag::OutsideJudge => self.outside_judge,
            StageTag::Determination => self.determination,
        }
    }

    pub fn total_requests(&self) -> u64 {
        StageTag::ALL.iter().map(|t| self.stage(*t).requests).sum()
    }

    pub fn total_retries(&self) -> u64 {
        StageTag::ALL.iter().map(|t| self.stage(*t).retries).sum()
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &CallLedger) -> CallLedger {
        let d = |a: StageCounters, b: StageCounters| StageCounters {
            requests: a.requests - b.requests,
            retries: a.retries - b.retries,
            failures: a.failures - b.failures,
        };
        CallLedger {
            detection: d(self.detection, earlier.detection),
            inside_judge: d(self.inside_judge, earlier.inside_judge),
            outside_judge: d(self.outside_judge, earlier.outside_judge),
            determination: d(self.determination, earlier.determination),
        }
    }
}

#[derive(Default)]
struct AtomicCounters {
    requests: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
}

impl AtomicCounters {
    fn load(&self) -> StageCounters {
        StageCounters {
            requests: self.requests.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
        }
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cond.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cond.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub limit: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            limit: 2,
            base_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry: u32) -> Duration {
        self.base_backoff.saturating_mul(1u32 << retry.min(16))
    }
}

/// Shared entry point for model calls. Cheap to share behind an `Arc`.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    sampling: SamplingConfig,
    retry: RetryPolicy,
    counters: [AtomicCounters; 4],
    in_flight: Semaphore,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            sampling: SamplingConfig::default(),
            retry: RetryPolicy::default(),
            counters: Default::default(),
            in_flight: Semaphore::new(4),
        }
    }

    pub fn with_sampling(mut self, sampling: SamplingConfig) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, max_in_flight: usize) -> Self {
        self.in_flight = Semaphore::new(max_in_flight);
        self
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.sampling
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    /// Identifies everything that can change a completion: backend and
    /// sampling parameters. Used in stage cache keys.
    pub fn fingerprint(&self) -> String {
        let s = &self.sampling;
        format!(
            "{}|t={}|k={}|p={}|max={}|sample={}",
            self.backend.id(),
            s.temperature,
            s.top_k,
            s.top_p,
            s.max_new_tokens,
            s.do_sample
        )
    }

    /// Builds a request with the gateway's sampling defaults.
    pub fn request(&self, stage_tag: StageTag, prompt: impl Into<String>) -> ModelRequest {
        ModelRequest {
            prompt: prompt.into(),
            sampling: self.sampling.clone(),
            stage_tag,
        }
    }

    /// Convenience wrapper around [`Gateway::complete`].
    pub fn complete_prompt(
        &self,
        stage_tag: StageTag,
        prompt: impl Into<String>,
    ) -> Result<ModelResponse, GatewayError> {
        let request = self.request(stage_tag, prompt);
        self.complete(&request)
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let counters = &self.counters[request.stage_tag.index()];
        counters.requests.fetch_add(1, Ordering::SeqCst);
        if request.prompt.trim().is_empty() {
            counters.failures.fetch_add(1, Ordering::SeqCst);
            return Err(GatewayError::EmptyPrompt);
        }
        let started = Instant::now();
        let mut attempt: u32 = 0;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.call(request)
            };
            match result {
                Ok(text) => {
                    return Ok(ModelResponse {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend_id: self.backend.id(),
                    })
                }
                Err(err) if err.is_retryable() && attempt < self.retry.limit => {
                    let delay = self.retry.delay(attempt);
                    log::warn!(
                        "{} call failed ({err}); retry {}/{} in {:?}",
                        request.stage_tag,
                        attempt + 1,
                        self.retry.limit,
                        delay
                    );
                    counters.retries.fetch_add(1, Ordering::SeqCst);
                    attempt += 1;
                    std::thread::sleep(delay);
                }
                Err(err) => {
                    counters.failures.fetch_add(1, Ordering::SeqCst);
                    return Err(match err {
                        BackendError::Transport(message) => GatewayError::Transport {
                            attempts: attempt + 1,
                            message,
                        },
                        BackendError::Refused { message, .. } => {
                            GatewayError::BackendRefused(message)
                        }
                    });
                }
            }
        }
    }

    pub fn ledger_snapshot(&self) -> CallLedger {
        CallLedger {
            detection: self.counters[0].load(),
            inside_judge: self.counters[1].load(),
            outside_judge: self.counters[2].load(),
            determination: self.counters[3].load(),
        }
    }
}

/// One line of a mock fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    pub stage: StageTag,
    /// SHA-256 of the exact prompt; absent means "any prompt for this stage".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    #[serde(default)]
    pub completion: String,
    /// Fault injection: `"transport"` or `"refused"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MockFixture {
    pub fn fallback(stage: StageTag, completion: impl Into<String>) -> Self {
        MockFixture {
            stage,
            prompt_digest: None,
            completion: completion.into(),
            error: None,
        }
    }

    pub fn for_prompt(stage: StageTag, prompt: &str, completion: impl Into<String>) -> Self {
        MockFixture {
            stage,
            prompt_digest: Some(text_digest(prompt)),
            completion: completion.into(),
            error: None,
        }
    }

    pub fn failing(stage: StageTag, error: &str) -> Self {
        MockFixture {
            stage,
            prompt_digest: None,
            completion: String::new(),
            error: Some(error.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read fixture file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

type MockKey = (StageTag, Option<String>);

/// Replay backend over a fixture table.
///
/// Lookup order: exact `(stage, prompt digest)`, then the stage fallback.
/// Several records under one key are served in rotation.
pub struct MockBackend {
    table: HashMap<MockKey, Vec<MockFixture>>,
    cursors: HashMap<MockKey, AtomicUsize>,
    id: String,
}

impl MockBackend {
    pub fn new(fixtures: impl IntoIterator<Item = MockFixture>) -> Self {
        let mut table: HashMap<MockKey, Vec<MockFixture>> = HashMap::new();
        let mut hasher_input = String::new();
        for f in fixtures {
            hasher_input.push_str(&serde_json::to_string(&f).expect("fixture serializes"));
            hasher_input.push('\n');
            table
                .entry((f.stage, f.prompt_digest.clone()))
                .or_default()
                .push(f);
        }
        let cursors = table.keys().map(|k| (k.clone(), AtomicUsize::new(0))).collect();
        MockBackend {
            table,
            cursors,
            id: format!("mock:{}", &text_digest(&hasher_input)[..16]),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        Ok(MockBackend::new(read_jsonl::<MockFixture>(path.as_ref())?))
    }

    fn lookup(&self, key: &MockKey) -> Option<&MockFixture> {
        let entries = self.table.get(key)?;
        let n = self.cursors[key].fetch_add(1, Ordering::SeqCst);
        Some(&entries[n % entries.len()])
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn call(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let digest = text_digest(&request.prompt);
        let fixture = self
            .lookup(&(request.stage_tag, Some(digest.clone())))
            .or_else(|| self.lookup(&(request.stage_tag, None)))
            .ok_or_else(|| BackendError::Refused {
                status: None,
                message: format!(
                    "no mock fixture for stage {} and prompt digest {digest}",
                    request.stage_tag
                ),
            })?;
        match fixture.error.as_deref() {
            None => Ok(fixture.completion.clone()),
            Some("transport") => Err(BackendError::Transport("injected transport fault".into())),
            Some(other) => Err(BackendError::Refused {
                status: None,
                message: format!("injected fault: {other}"),
            }),
        }
    }
}

/// Reads a line-delimited JSON file, skipping blank lines.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, FixtureError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| FixtureError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| FixtureError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FixtureError::Malformed {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Live chat-completions client. The prompt is sent as a single user message.
pub struct ChatCompletionsBackend {
    endpoint_url: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl ChatCompletionsBackend {
    pub fn new(endpoint_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        ChatCompletionsBackend {
            endpoint_url: endpoint_url.into(),
            api_key,
            model: model.into(),
            agent,
        }
    }

    pub fn request_body(&self, request: &ModelRequest) -> serde_json::Value {
        let s = &request.sampling;
        let temperature = if s.do_sample { s.temperature } else { 0.0 };
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "max_tokens": s.max_new_tokens,
            "stream": false,
        })
    }
}

impl ChatBackend for ChatCompletionsBackend {
    fn id(&self) -> String {
        format!("chat:{}@{}", self.model, self.endpoint_url)
    }

    fn call(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.endpoint_url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, &body));
        }
        parse_chat_response(&body)
    }
}

/// Extracts `choices[0].message.content` (or legacy `choices[0].text`).
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Transport(format!("invalid JSON from model endpoint: {e}")))?;
    let choice = &value["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .map(str::to_string)
        .ok_or_else(|| BackendError::Refused {
            status: None,
            message: format!("response has no choice text: {}", truncate_for_log(body)),
        })
}

/// Wraps a backend and records every successful completion as a fixture.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    recorded: Mutex<Vec<MockFixture>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        RecordingBackend {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    /// Recorded fixtures, first completion per `(stage, prompt)` kept.
    pub fn fixtures(&self) -> Vec<MockFixture> {
        let recorded = self.recorded.lock().unwrap();
        let mut seen = std::collections::HashSet::new();
        recorded
            .iter()
            .filter(|f| seen.insert((f.stage, f.prompt_digest.clone())))
            .cloned()
            .collect()
    }

    pub fn write_fixtures(&self, path: impl AsRef<Path>) -> std::io::Result<usize> {
        let fixtures = self.fixtures();
        write_jsonl(path.as_ref(), &fixtures)?;
        Ok(fixtures.len())
    }
}

impl ChatBackend for RecordingBackend {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn call(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let text = self.inner.call(request)?;
        self.recorded.lock().unwrap().push(MockFixture::for_prompt(
            request.stage_tag,
            &request.prompt,
            text.clone(),
        ));
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gateway(fixtures: Vec<MockFixture>, limit: u32) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(fixtures))).with_retry(RetryPolicy {
            limit,
            base_backoff: Duration::ZERO,
        })
    }

    #[test]
    fn sampling_defaults() {
        let s = SamplingConfig::default();
        assert_eq!(s.temperature, 0.70);
        assert_eq!(s.top_k, 50);
        assert_eq!(s.top_p, 0.95);
        assert_eq!(s.max_new_tokens, 256);
        assert!(s.do_sample);
        assert!(s.validate().is_ok());
        assert!(SamplingConfig { top_p: 0.0, ..s.clone() }.validate().is_err());
        assert!(SamplingConfig { top_k: 0, ..s }.validate().is_err());
    }

    #[test]
    fn mock_returns_stage_fallback() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::Detection, "a, b, c, d, e")], 2);
        let r = gw.complete_prompt(StageTag::Detection, "anything").unwrap();
        assert_eq!(r.text, "a, b, c, d, e");
        assert!(r.backend_id.starts_with("mock:"));
    }

    #[test]
    fn exact_digest_beats_fallback() {
        let gw = gateway(
            vec![
                MockFixture::fallback(StageTag::Detection, "fallback"),
                MockFixture::for_prompt(StageTag::Detection, "p1", "exact"),
            ],
            2,
        );
        assert_eq!(gw.complete_prompt(StageTag::Detection, "p1").unwrap().text, "exact");
        assert_eq!(gw.complete_prompt(StageTag::Detection, "p2").unwrap().text, "fallback");
    }

    #[test]
    fn identical_requests_identical_responses() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::InsideJudge, "x")], 2);
        let a = gw.complete_prompt(StageTag::InsideJudge, "same").unwrap();
        let b = gw.complete_prompt(StageTag::InsideJudge, "same").unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(gw.ledger_snapshot().inside_judge.requests, 2);
    }

    #[test]
    fn fresh_ledger_is_zero() {
        let gw = gateway(vec![], 2);
        assert_eq!(gw.ledger_snapshot(), CallLedger::default());
    }

    #[test]
    fn ledger_counts_per_stage() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::Detection, "k")], 2);
        gw.complete_prompt(StageTag::Detection, "p").unwrap();
        let l = gw.ledger_snapshot();
        assert_eq!(l.detection.requests, 1);
        assert_eq!(l.inside_judge, StageCounters::default());
        assert_eq!(l.outside_judge, StageCounters::default());
        assert_eq!(l.determination, StageCounters::default());
    }

    #[test]
    fn retried_then_failed() {
        let gw = gateway(vec![MockFixture::failing(StageTag::OutsideJudge, "transport")], 2);
        let err = gw.complete_prompt(StageTag::OutsideJudge, "p").unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }));
        let l = gw.ledger_snapshot().outside_judge;
        assert_eq!(l, StageCounters { requests: 1, retries: 2, failures: 1 });
    }

    #[test]
    fn transient_failure_then_success() {
        let gw = gateway(
            vec![
                MockFixture::failing(StageTag::Detection, "transport"),
                MockFixture::fallback(StageTag::Detection, "ok"),
            ],
            2,
        );
        assert_eq!(gw.complete_prompt(StageTag::Detection, "p").unwrap().text, "ok");
        assert_eq!(
            gw.ledger_snapshot().detection,
            StageCounters { requests: 1, retries: 1, failures: 0 }
        );
    }

    #[test]
    fn refusal_is_not_retried() {
        let gw = gateway(vec![MockFixture::failing(StageTag::Detection, "refused")], 2);
        assert!(matches!(
            gw.complete_prompt(StageTag::Detection, "p"),
            Err(GatewayError::BackendRefused(_))
        ));
        assert_eq!(
            gw.ledger_snapshot().detection,
            StageCounters { requests: 1, retries: 0, failures: 1 }
        );
    }

    #[test]
    fn missing_fixture_is_refusal() {
        let gw = gateway(vec![], 2);
        let err = gw.complete_prompt(StageTag::Determination, "p").unwrap_err();
        assert!(matches!(err, GatewayError::BackendRefused(m) if m.contains("no mock fixture")));
    }

    #[test]
    fn empty_prompt_rejected() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::Detection, "x")], 2);
        assert_eq!(gw.complete_prompt(StageTag::Detection, "  "), Err(GatewayError::EmptyPrompt));
    }

    #[test]
    fn concurrent_calls_are_all_counted() {
        let gw = Arc::new(
            gateway(vec![MockFixture::fallback(StageTag::Detection, "x")], 0).with_concurrency(3),
        );
        std::thread::scope(|s| {
            for _ in 0..8 {
                let gw = gw.clone();
                s.spawn(move || {
                    for _ in 0..25 {
                        gw.complete_prompt(StageTag::Detection, "p").unwrap();
                    }
                });
            }
        });
        assert_eq!(gw.ledger_snapshot().total_requests(), 200);
    }

    #[test]
    fn status_classification() {
        assert!(BackendError::from_status(503, "").is_retryable());
        assert!(BackendError::from_status(429, "").is_retryable());
        assert!(!BackendError::from_status(401, "bad key").is_retryable());
        assert!(!BackendError::from_status(400, "").is_retryable());
    }

    #[test]
    fn chat_response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"[This is fake news]"}}]}"#;
        assert_eq!(parse_chat_response(body).unwrap(), "[This is fake news]");
        assert_eq!(parse_chat_response(r#"{"choices":[{"text":"t"}]}"#).unwrap(), "t");
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
    }

    #[test]
    fn request_body_carries_sampling() {
        let b = ChatCompletionsBackend::new("http://x/v1/chat/completions", None, "zephyr");
        let gw = Gateway::new(Arc::new(MockBackend::new(vec![])));
        let body = b.request_body(&gw.request(StageTag::Detection, "hello"));
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["top_k"], 50);
        assert_eq!(body["top_p"], 0.95);
        assert_eq!(body["max_tokens"], 256);
    }

    #[test]
    fn recording_backend_round_trips_through_mock() {
        let inner = Arc::new(MockBackend::new(vec![MockFixture::fallback(StageTag::Detection, "kw")]));
        let rec = Arc::new(RecordingBackend::new(inner));
        let gw = Gateway::new(rec.clone());
        gw.complete_prompt(StageTag::Detection, "prompt one").unwrap();
        gw.complete_prompt(StageTag::Detection, "prompt one").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        assert_eq!(rec.write_fixtures(&path).unwrap(), 1);
        let replay = Gateway::new(Arc::new(MockBackend::from_file(&path).unwrap()));
        assert_eq!(replay.complete_prompt(StageTag::Detection, "prompt one").unwrap().text, "kw");
        assert!(replay.complete_prompt(StageTag::Detection, "prompt two").is_err());
    }
}
