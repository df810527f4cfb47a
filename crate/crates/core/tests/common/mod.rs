//! Synthetic corpus and scripted backends shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use newsverdict::detection::DetectionConfig;
use newsverdict::inside::{build_datastore, CharHistogramEmbedder, Datastore, EmbeddingProvider};
use newsverdict::llm::{BackendError, ChatBackend, Gateway, ModelRequest, RecordingBackend, RetryPolicy, StageTag};
use newsverdict::outside::{build_query, CachedSearch, FixtureSearchClient, SearchClient, SearchFixture};
use newsverdict::pipeline::{PipelineConfig, PipelineContext, StageCache};
use newsverdict::{KeywordSet, Label, NewsArticle};

const SUBJECTS: [&str; 8] = ["Senator", "Governor", "Scientists", "Mayor", "Celebrity", "Ministry", "Court", "Startup"];
const VERBS: [&str; 6] = ["announces", "denies", "unveils", "blocks", "funds", "cancels"];
const OBJECTS: [&str; 7] = ["tariff", "vaccine", "bridge", "festival", "merger", "curfew", "satellite"];
const PLACES: [&str; 6] = ["Ohio", "Texas", "Berlin", "Lagos", "Osaka", "Quebec"];
const DAYS: [&str; 5] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday"];

/// Body markers the scripted backend reacts to.
pub const CONTESTED: &str = "contested";
pub const OBSCURE: &str = "obscure";
pub const GARBLED: &str = "garbled";

pub fn article(id: &str, i: usize, label: Label) -> NewsArticle {
    let title = format!(
        "{} {} {} {} {} {}",
        SUBJECTS[i % SUBJECTS.len()],
        VERBS[(i / 2) % VERBS.len()],
        OBJECTS[(i * 3) % OBJECTS.len()],
        PLACES[(i * 5) % PLACES.len()],
        DAYS[(i * 7) % DAYS.len()],
        i
    );
    let body = match label {
        Label::Fake => format!("A viral rumor claims the {} story is secret. No named sources.", OBJECTS[i % 7]),
        Label::Real => format!("Officials said the {} plan follows last year's review.", OBJECTS[i % 7]),
    };
    let a = NewsArticle::new(id, title, body).with_label(label);
    if i.is_multiple_of(3) {
        a.with_tweets([format!("reading about #{}", OBJECTS[i % 7]), "wow".to_string()])
    } else {
        a
    }
}

fn with_marker(mut a: NewsArticle, marker: &str) -> NewsArticle {
    a.body = format!("{} This account is {marker}.", a.body);
    a
}

/// `n_real` real then `n_fake` fake articles with ids `<prefix>-r000`, ….
/// When `markers` is set, some articles carry markers that make the scripted
/// judges disagree or the search come back empty.
pub fn corpus(prefix: &str, n_real: usize, n_fake: usize, markers: bool) -> Vec<NewsArticle> {
    let mut out = Vec::new();
    for (label, n, tag) in [(Label::Real, n_real, "r"), (Label::Fake, n_fake, "f")] {
        for j in 0..n {
            let i = j * 2 + usize::from(label == Label::Fake) + prefix.len();
            let mut a = article(&format!("{prefix}-{tag}{j:03}"), i, label);
            if markers && j % 4 == 1 {
                a = with_marker(a, CONTESTED);
            }
            if markers && j % 5 == 2 {
                a = with_marker(a, OBSCURE);
            }
            out.push(a);
        }
    }
    out
}

pub fn garble(a: NewsArticle) -> NewsArticle {
    with_marker(a, GARBLED)
}

/// The keywords the scripted detector returns for an article.
pub fn keywords_for(title: &str) -> Vec<String> {
    title
        .split_whitespace()
        .filter(|w| w.len() >= 3)
        .take(5)
        .map(str::to_string)
        .collect()
}

fn between<'a>(s: &'a str, start: &str, end: &str) -> &'a str {
    let from = s.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &s[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    &rest[..to]
}

fn verdict(label: Label, why: &str) -> String {
    format!("[This is {label} news]. {why}")
}

/// Deterministic stand-in for a chat model: reads the prompt and answers by
/// simple rules.
///
/// - detection: the first five title words of three or more letters;
/// - inside judge: fake when the target mentions a rumor, flipped for
///   contested articles, unparseable for garbled ones;
/// - outside judge: follows the evidence, or the rumor rule without it;
/// - determination: sides with the outside view.
pub struct ScriptedBackend;

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted:v1".into()
    }

    fn call(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let p = &request.prompt;
        let rumor = |text: &str| if text.contains("rumor") { Label::Fake } else { Label::Real };
        Ok(match request.stage_tag {
            StageTag::Detection => keywords_for(between(p, "news title: ", ", news text:")).join(", "),
            StageTag::InsideJudge => {
                let target = p.split("[target news]:").nth(1).unwrap_or("");
                if target.contains(GARBLED) {
                    "I am not able to decide.".into()
                } else {
                    let mut label = rumor(target);
                    if target.contains(CONTESTED) {
                        label = label.opposite();
                    }
                    verdict(label, "The style matches the examples.")
                }
            }
            StageTag::OutsideJudge => {
                let info = between(p, "The additional information is: ", "\n\n[Decision]:");
                let label = if info.contains("debunked") {
                    Label::Fake
                } else if info.contains("confirmed") {
                    Label::Real
                } else {
                    rumor(between(p, "The news article is: ", "\n\n"))
                };
                verdict(label, "The retrieved information settles it.")
            }
            StageTag::Determination => {
                let others = between(p, "Others believe that [This is ", " news]");
                let label: Label = others.parse().map_err(|_| BackendError::Refused {
                    status: None,
                    message: "unexpected determination prompt".into(),
                })?;
                verdict(label, "The outside evidence is more specific.")
            }
        })
    }
}

/// One search fixture per article, keyed by the query the scripted detector
/// leads to. Obscure articles get no results.
pub fn search_fixtures(articles: &[NewsArticle]) -> Vec<SearchFixture> {
    articles
        .iter()
        .map(|a| {
            let query = build_query(&KeywordSet::new(a.id.clone(), keywords_for(&a.title)));
            if a.body.contains(OBSCURE) {
                return SearchFixture::empty(&query.text);
            }
            let snippet = match a.gold_label {
                Some(Label::Fake) => format!("Fact-checkers debunked claims that {}", a.title),
                _ => format!("Reports confirmed that {}", a.title),
            };
            SearchFixture::hit(
                &query.text,
                &format!("{} - Wikipedia", a.title),
                &snippet,
                &format!("https://en.wikipedia.org/wiki/{}", a.id),
            )
        })
        .collect()
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

pub fn no_backoff() -> RetryPolicy {
    RetryPolicy {
        limit: 2,
        base_backoff: Duration::ZERO,
    }
}

pub fn gateway(backend: Arc<dyn ChatBackend>) -> Gateway {
    Gateway::new(backend).with_retry(no_backoff())
}

pub fn embedder() -> Arc<dyn EmbeddingProvider> {
    Arc::new(CharHistogramEmbedder::default())
}

pub fn store(train: &[NewsArticle], gateway: &Gateway) -> Datastore {
    build_datastore(train, &DetectionConfig::default(), embedder().as_ref(), gateway, 4)
        .unwrap()
        .store
}

pub fn deterministic_config() -> PipelineConfig {
    PipelineConfig {
        record_timings: false,
        ..PipelineConfig::default()
    }
}

pub fn context(
    gateway: Gateway,
    store: Datastore,
    search: Arc<dyn SearchClient>,
    cache: Option<PathBuf>,
    config: PipelineConfig,
) -> PipelineContext {
    PipelineContext {
        config,
        gateway: Arc::new(gateway),
        store: Arc::new(store),
        provider: embedder(),
        search: Arc::new(CachedSearch::new(search, None)),
        cache: cache.map(StageCache::new),
    }
}

/// Files for a fully offline run: recorded chat fixtures, search fixtures,
/// the training and test sets, and a config pointing at all of them.
pub struct World {
    pub dir: tempfile::TempDir,
    pub train: Vec<NewsArticle>,
    pub test: Vec<NewsArticle>,
}

impl World {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn chat_fixtures(&self) -> PathBuf {
        self.path("chat.jsonl")
    }

    pub fn search_fixtures(&self) -> PathBuf {
        self.path("search.jsonl")
    }

    /// Writes `config.cfg` with mock backends and the given extra lines.
    pub fn write_config(&self, extra: &str) -> PathBuf {
        let path = self.path("config.cfg");
        let text = format!(
            "[model]\nbackend = mock\nmock_fixtures = chat.jsonl\nbackoff_ms = 0\n\n\
             [embedding]\nbackend = mock\n\n\
             [search]\nbackend = fixture\nfixtures = search.jsonl\n\n\
             [inside]\nstore_path = store.jsonl\n\n\
             [pipeline]\nrecord_timings = false\ncache_dir = cache\n\n{extra}\n"
        );
        std::fs::write(&path, text).unwrap();
        path
    }

    pub fn mock_context(&self, store: Datastore, cache: Option<PathBuf>) -> PipelineContext {
        let backend = newsverdict::llm::MockBackend::from_file(self.chat_fixtures()).unwrap();
        let search = FixtureSearchClient::from_file(self.search_fixtures()).unwrap();
        context(gateway(Arc::new(backend)), store, Arc::new(search), cache, deterministic_config())
    }
}

/// Records the scripted backend's answers for building a store from `train`
/// and running every article in `test`, and writes all files of a [`World`].
pub fn record_world(train: Vec<NewsArticle>, test: Vec<NewsArticle>) -> World {
    let dir = tempfile::tempdir().unwrap();
    let recorder = Arc::new(RecordingBackend::new(Arc::new(ScriptedBackend)));
    let gw = gateway(recorder.clone());
    let store = store(&train, &gw);
    store.save(dir.path().join("store.jsonl")).unwrap();
    let fixtures = search_fixtures(&test);
    write_jsonl(&dir.path().join("search.jsonl"), &fixtures);
    let ctx = context(
        gw,
        store,
        Arc::new(FixtureSearchClient::new(fixtures)),
        None,
        deterministic_config(),
    );
    for a in &test {
        ctx.run_article(a);
    }
    recorder.write_fixtures(dir.path().join("chat.jsonl")).unwrap();
    newsverdict::domain::write_articles(dir.path().join("train.jsonl"), &train).unwrap();
    newsverdict::domain::write_articles(dir.path().join("test.jsonl"), &test).unwrap();
    World { dir, train, test }
}
