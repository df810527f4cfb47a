//! Live-protocol clients against a local one-request-per-connection server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use newsverdict::inside::{EmbeddingProvider, HttpEncoder};
use newsverdict::llm::{ChatCompletionsBackend, Gateway, GatewayError, RetryPolicy, SamplingConfig, StageTag};
use newsverdict::outside::{SearchClient, SearchError, SerpApiClient};

#[derive(Debug, Clone)]
struct Recorded {
    request_line: String,
    headers: Vec<String>,
    body: String,
}

struct Server {
    url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    /// Serves `responses` in order, one per connection, then stops.
    fn start(responses: Vec<(u16, &'static str)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut headers = Vec::new();
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end().to_string();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    headers.push(line);
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(Recorded {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
        });
        Server {
            url,
            requests,
            handle: Some(handle),
        }
    }

    fn finish(mut self) -> Vec<Recorded> {
        self.handle.take().unwrap().join().unwrap();
        self.requests.lock().unwrap().clone()
    }
}

const CHAT_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"[This is real news]. Confirmed."}}]}"#;

fn chat_gateway(url: &str, key: Option<&str>) -> Gateway {
    let backend = ChatCompletionsBackend::new(format!("{url}/v1/chat/completions"), key.map(str::to_string), "test-model");
    Gateway::new(Arc::new(backend)).with_retry(RetryPolicy {
        limit: 2,
        base_backoff: Duration::ZERO,
    })
}

#[test]
fn chat_request_carries_prompt_sampling_and_auth() {
    let server = Server::start(vec![(200, CHAT_OK)]);
    let gw = chat_gateway(&server.url, Some("sk-test"));
    let resp = gw.complete_prompt(StageTag::OutsideJudge, "judge this").unwrap();
    assert_eq!(resp.text, "[This is real news]. Confirmed.");
    let requests = server.finish();
    let r = &requests[0];
    assert_eq!(r.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert!(r.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    let body: serde_json::Value = serde_json::from_str(&r.body).unwrap();
    let defaults = SamplingConfig::default();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "judge this");
    assert_eq!(body["temperature"], defaults.temperature);
    assert_eq!(body["top_p"], defaults.top_p);
    assert_eq!(body["top_k"], defaults.top_k);
    assert_eq!(body["max_tokens"], defaults.max_new_tokens);
    let ledger = gw.ledger_snapshot();
    assert_eq!((ledger.outside_judge.requests, ledger.outside_judge.retries), (1, 0));
}

#[test]
fn unauthorized_is_refused_without_retry() {
    let server = Server::start(vec![(401, r#"{"error":"bad key"}"#)]);
    let gw = chat_gateway(&server.url, Some("wrong"));
    let err = gw.complete_prompt(StageTag::Detection, "x").unwrap_err();
    assert!(matches!(err, GatewayError::BackendRefused(_)), "{err:?}");
    assert_eq!(server.finish().len(), 1);
    let ledger = gw.ledger_snapshot();
    assert_eq!(ledger.detection.requests, 1);
    assert_eq!(ledger.detection.retries, 0);
    assert_eq!(ledger.detection.failures, 1);
}

#[test]
fn server_errors_are_retried() {
    let server = Server::start(vec![(503, "{}"), (429, "{}"), (200, CHAT_OK)]);
    let gw = chat_gateway(&server.url, None);
    let resp = gw.complete_prompt(StageTag::InsideJudge, "x").unwrap();
    assert!(resp.text.starts_with("[This is real news]"));
    let requests = server.finish();
    assert_eq!(requests.len(), 3);
    assert!(!requests[0].headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization")));
    let ledger = gw.ledger_snapshot();
    assert_eq!((ledger.inside_judge.requests, ledger.inside_judge.retries), (1, 2));
}

#[test]
fn exhausted_retries_surface_transport_error() {
    let server = Server::start(vec![(500, "{}"), (502, "{}"), (504, "{}")]);
    let gw = chat_gateway(&server.url, None);
    let err = gw.complete_prompt(StageTag::Determination, "x").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err:?}");
    server.finish();
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let gw = chat_gateway(&format!("http://127.0.0.1:{port}"), None);
    let err = gw.complete_prompt(StageTag::Detection, "x").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err:?}");
}

const SERP_OK: &str = r#"{"organic_results":[
  {"position":2,"title":"Second","link":"https://en.wikipedia.org/wiki/B","snippet":"b"},
  {"position":1,"title":"Bridge","link":"https://en.wikipedia.org/wiki/Bridge","snippet":"A bridge spans a river."}
]}"#;

#[test]
fn serpapi_query_and_top_result() {
    let server = Server::start(vec![(200, SERP_OK)]);
    let client = SerpApiClient::new(format!("{}/search.json", server.url), "serp-key", 0);
    let resp = client.search("en.wikipedia.org Mayor bridge Monday").unwrap();
    let top = resp.top().unwrap();
    assert_eq!(top.title, "Bridge");
    assert_eq!(top.snippet, "A bridge spans a river.");
    let requests = server.finish();
    let line = &requests[0].request_line;
    assert!(line.starts_with("GET /search.json?"), "{line}");
    assert!(line.contains("q=en.wikipedia.org"), "{line}");
    assert!(line.contains("engine=google"), "{line}");
    assert!(line.contains("api_key=serp-key"), "{line}");
}

#[test]
fn serpapi_no_results_and_errors() {
    let server = Server::start(vec![
        (200, r#"{"error":"Google hasn't returned any results for this query."}"#),
        (401, r#"{"error":"Invalid API key."}"#),
        (503, "{}"),
        (200, r#"{"organic_results":[]}"#),
    ]);
    let client = SerpApiClient::new(format!("{}/search.json", server.url), "k", 1).with_backoff(Duration::ZERO);
    assert!(client.search("q").unwrap().results.is_empty());
    assert!(matches!(client.search("q"), Err(SearchError::Refused(_))));
    assert!(client.search("q").unwrap().results.is_empty());
    assert_eq!(server.finish().len(), 4);
}

#[test]
fn http_encoder_posts_text_and_checks_dimension() {
    let server = Server::start(vec![(200, "[0.6, 0.8]"), (500, "{}")]);
    let encoder = HttpEncoder::new(format!("{}/embed", server.url), "enc", 2);
    assert_eq!(encoder.embed("Mayor bridge").unwrap(), vec![0.6, 0.8]);
    assert!(encoder.embed("again").is_err());
    let requests = server.finish();
    let body: serde_json::Value = serde_json::from_str(&requests[0].body).unwrap();
    assert_eq!(body["inputs"], "Mayor bridge");
    assert_eq!(body["model"], "enc");
}
