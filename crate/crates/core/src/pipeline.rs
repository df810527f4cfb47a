//! Per-article orchestration: detection, then the inside and outside paths in
//! parallel, then determination. Each stage's output is cached under a key
//! derived from the exact inputs that produced it.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detection::{detect, DetectionConfig};
use crate::determination::{determine, ConflictFallback, DeterminationOutcome};
use crate::domain::{
    article_digest, text_digest, Evidence, Judgement, KeywordSet, NewsArticle, PipelineTrace, Stage,
    StageNote, Verdict, SCHEMA_VERSION,
};
use crate::inside::{
    build_datastore, embed_keywords, knn_retrieve, Datastore, DatastoreBuild, Demonstrations, EmbeddingProvider,
    InsideError,
};
use crate::judge::{inside_judge, outside_judge, render_inside_prompt, render_outside_prompt, JudgeConfig};
use crate::llm::Gateway;
use crate::outside::{build_query, search, write_atomic, CachedSearch};
use crate::prompt::ArticleFields;

/// Which perspectives run. The single-perspective modes are the ablated
/// variants without a determination step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    #[default]
    Full,
    InsideOnly,
    OutsideOnly,
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "full" => Ok(PipelineMode::Full),
            "inside-only" => Ok(PipelineMode::InsideOnly),
            "outside-only" => Ok(PipelineMode::OutsideOnly),
            other => Err(format!("expected full, inside-only or outside-only, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detection: DetectionConfig,
    /// Neighbors retrieved per class.
    pub k: usize,
    pub judge: JudgeConfig,
    pub conflict_fallback: ConflictFallback,
    pub mode: PipelineMode,
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detection: DetectionConfig::default(),
            k: 2,
            judge: JudgeConfig::default(),
            conflict_fallback: ConflictFallback::default(),
            mode: PipelineMode::default(),
            record_timings: true,
        }
    }
}

const DATASTORE_DIR: &str = "datastore";

/// Content-addressed store of stage outputs: `<dir>/<stage>/<key>.json`.
pub struct StageCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct CacheEnvelope<T> {
    stage: Stage,
    key: String,
    value: T,
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StageCache {
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hashes the schema version and each component, length-prefixed.
    pub fn key(parts: &[&str]) -> String {
        let mut buf = String::new();
        for p in std::iter::once(SCHEMA_VERSION).chain(parts.iter().copied()) {
            buf.push_str(&p.len().to_string());
            buf.push(':');
            buf.push_str(p);
        }
        text_digest(&buf)
    }

    fn path(&self, stage: Stage, key: &str) -> PathBuf {
        self.dir.join(stage.as_str()).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, stage: Stage, key: &str) -> Option<T> {
        let found = std::fs::read_to_string(self.path(stage, key))
            .ok()
            .and_then(|s| serde_json::from_str::<CacheEnvelope<T>>(&s).ok())
            .filter(|e| e.stage == stage && e.key == key)
            .map(|e| e.value);
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::SeqCst),
            None => self.misses.fetch_add(1, Ordering::SeqCst),
        };
        found
    }

    pub fn put<T: Serialize>(&self, stage: Stage, key: &str, value: &T) {
        let envelope = CacheEnvelope {
            stage,
            key: key.to_string(),
            value,
        };
        let bytes = serde_json::to_vec_pretty(&envelope).expect("cache value serializes");
        if let Err(e) = write_atomic(&self.path(stage, key), &bytes) {
            log::warn!("failed to write stage cache entry: {e}");
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    /// Entry counts per stage directory.
    pub fn stats(&self) -> Vec<(Stage, usize)> {
        Stage::ALL
            .iter()
            .map(|s| {
                let n = std::fs::read_dir(self.dir.join(s.as_str()))
                    .map(|rd| rd.filter_map(Result::ok).count())
                    .unwrap_or(0);
                (*s, n)
            })
            .collect()
    }

    /// Number of cached datastores.
    pub fn datastore_count(&self) -> usize {
        std::fs::read_dir(self.dir.join(DATASTORE_DIR))
            .map(|rd| rd.filter_map(Result::ok).count())
            .unwrap_or(0)
    }

    fn datastore_path(&self, key: &str) -> PathBuf {
        self.dir.join(DATASTORE_DIR).join(format!("{key}.jsonl"))
    }

    pub fn clear(&self) -> std::io::Result<()> {
        let dirs = Stage::ALL.iter().map(|s| s.as_str()).chain([DATASTORE_DIR]);
        for name in dirs {
            let d = self.dir.join(name);
            if d.exists() {
                std::fs::remove_dir_all(d)?;
            }
        }
        Ok(())
    }
}

/// Builds the datastore for `training`, or loads the one a previous run
/// built from the same articles, detection settings, encoder and model.
pub fn build_datastore_cached(
    training: &[NewsArticle],
    detection: &DetectionConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
    workers: usize,
    cache: Option<&StageCache>,
) -> Result<DatastoreBuild, InsideError> {
    let Some(cache) = cache else {
        return build_datastore(training, detection, provider, gateway, workers);
    };
    let articles: Vec<String> = training
        .iter()
        .map(|a| format!("{}:{}", article_digest(a), a.gold_label.map_or("", |l| l.as_str())))
        .collect();
    let key = StageCache::key(&[
        "datastore",
        &articles.join(","),
        &json(detection),
        &provider.fingerprint(),
        &gateway.fingerprint(),
    ]);
    let path = cache.datastore_path(&key);
    if path.exists() {
        match Datastore::load(&path, Some(&provider.fingerprint())) {
            Ok(store) => {
                return Ok(DatastoreBuild {
                    store,
                    warnings: Vec::new(),
                })
            }
            Err(e) => log::warn!("ignoring unreadable cached datastore {}: {e}", path.display()),
        }
    }
    let build = build_datastore(training, detection, provider, gateway, workers)?;
    build.store.save(&path)?;
    Ok(build)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    keywords: KeywordSet,
    raw_outputs: Vec<String>,
    fallback: Option<String>,
}

/// Everything a worker needs to run articles. Shared read-only.
pub struct PipelineContext {
    pub config: PipelineConfig,
    pub gateway: Arc<Gateway>,
    pub store: Arc<Datastore>,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub search: Arc<CachedSearch>,
    pub cache: Option<StageCache>,
}

#[derive(Default)]
struct PathOutput {
    demonstrations: Option<Demonstrations>,
    evidence: Option<Evidence>,
    judgement: Option<Judgement>,
    errors: Vec<StageNote>,
    notes: Vec<StageNote>,
    timings: Vec<(Stage, u64)>,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

impl PipelineContext {
    fn cached<T, E>(
        &self,
        stage: Stage,
        key: &str,
        compute: impl FnOnce() -> Result<T, E>,
        cacheable: impl FnOnce(&T) -> bool,
    ) -> Result<T, E>
    where
        T: Serialize + DeserializeOwned,
    {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get::<T>(stage, key) {
                return Ok(v);
            }
        }
        let v = compute()?;
        if let Some(cache) = &self.cache {
            if cacheable(&v) {
                cache.put(stage, key, &v);
            }
        }
        Ok(v)
    }

    fn judge_fingerprint(&self) -> String {
        json(&self.config.judge)
    }

    fn inside_path(&self, article: &NewsArticle, digest: &str, keywords: &KeywordSet) -> PathOutput {
        let mut out = PathOutput::default();
        let k = self.config.k;
        let started = Instant::now();
        let key = StageCache::key(&[
            "inside_investigation",
            &json(keywords),
            &k.to_string(),
            self.provider.fingerprint().as_str(),
            &self.store.content_digest(),
        ]);
        let demos = self.cached(
            Stage::InsideInvestigation,
            &key,
            || {
                let query = embed_keywords(keywords, self.provider.as_ref())?;
                knn_retrieve(&query, &self.store, k)
            },
            |_| true,
        );
        out.timings.push((Stage::InsideInvestigation, started.elapsed().as_millis() as u64));
        let demos = match demos {
            Ok(d) => d,
            Err(e) => {
                out.errors.push(StageNote::new(Stage::InsideInvestigation, e.to_string()));
                return out;
            }
        };
        for w in demos.shortfall_warnings(k) {
            out.notes.push(StageNote::new(Stage::InsideInvestigation, w));
        }
        out.demonstrations = Some(demos.clone());
        if demos.is_empty() {
            out.errors.push(StageNote::new(Stage::InsideJudge, "no inside demonstrations"));
            return out;
        }
        if let Ok(rendered) = render_inside_prompt(article, &demos, &self.config.judge) {
            for t in rendered.truncated {
                out.notes.push(StageNote::new(Stage::InsideJudge, format!("truncated {t}")));
            }
        }

        let started = Instant::now();
        let key = StageCache::key(&[
            "inside_judge",
            digest,
            &text_digest(&json(&demos)),
            &self.judge_fingerprint(),
            &self.gateway.fingerprint(),
        ]);
        let judgement = self.cached(
            Stage::InsideJudge,
            &key,
            || inside_judge(article, &demos, &self.gateway, &self.config.judge),
            |_| true,
        );
        out.timings.push((Stage::InsideJudge, started.elapsed().as_millis() as u64));
        match judgement {
            Ok(j) => out.judgement = Some(j),
            Err(e) => out.errors.push(StageNote::new(Stage::InsideJudge, e.to_string())),
        }
        out
    }

    fn outside_path(&self, article: &NewsArticle, digest: &str, keywords: &KeywordSet) -> PathOutput {
        let mut out = PathOutput::default();
        let started = Instant::now();
        let query = build_query(keywords);
        let key = StageCache::key(&["outside_investigation", &query.text, &self.search.client_id()]);
        let evidence = self.cached(
            Stage::OutsideInvestigation,
            &key,
            || search(&query, &self.search),
            |_| true,
        );
        out.timings.push((Stage::OutsideInvestigation, started.elapsed().as_millis() as u64));
        let evidence = match evidence {
            Ok(e) => e,
            Err(e) => {
                // A failed search still lets the outside judge run on the sentinel.
                out.errors.push(StageNote::new(Stage::OutsideInvestigation, e.to_string()));
                Evidence::empty(&query.text)
            }
        };
        if evidence.is_empty() && out.errors.is_empty() {
            out.errors.push(StageNote::new(Stage::OutsideInvestigation, "no outside evidence"));
        }
        out.evidence = Some(evidence.clone());
        for t in render_outside_prompt(article, &evidence, &self.config.judge).truncated {
            out.notes.push(StageNote::new(Stage::OutsideJudge, format!("truncated {t}")));
        }

        let started = Instant::now();
        let key = StageCache::key(&[
            "outside_judge",
            digest,
            &json(&evidence),
            &self.judge_fingerprint(),
            &self.gateway.fingerprint(),
        ]);
        let judgement = self.cached(
            Stage::OutsideJudge,
            &key,
            || outside_judge(article, &evidence, &self.gateway, &self.config.judge),
            |_| true,
        );
        out.timings.push((Stage::OutsideJudge, started.elapsed().as_millis() as u64));
        match judgement {
            Ok(j) => out.judgement = Some(j),
            Err(e) => out.errors.push(StageNote::new(Stage::OutsideJudge, e.to_string())),
        }
        out
    }

    /// Runs one article end to end. Never fails: problems land in
    /// `stage_errors`, in the worst case with no verdict.
    pub fn run_article(&self, article: &NewsArticle) -> PipelineTrace {
        let mut trace = PipelineTrace::new(article);
        let digest = article_digest(article);
        let record_timing = |trace: &mut PipelineTrace, stage: Stage, ms: u64| {
            if self.config.record_timings {
                trace.timings.insert(stage, ms);
            }
        };

        let started = Instant::now();
        let det_cfg = &self.config.detection;
        let key = StageCache::key(&["detection", &digest, &json(det_cfg), &self.gateway.fingerprint()]);
        let detection = self.cached(
            Stage::Detection,
            &key,
            || {
                detect(article, det_cfg, &self.gateway).map(|o| DetectionRecord {
                    keywords: o.keywords,
                    raw_outputs: o.raw_outputs,
                    fallback: o.fallback,
                })
            },
            |_| true,
        );
        record_timing(&mut trace, Stage::Detection, started.elapsed().as_millis() as u64);
        let detection = match detection {
            Ok(d) => d,
            Err(e) => {
                trace.error(Stage::Detection, e.to_string());
                return trace;
            }
        };
        for field in ArticleFields::new(article, det_cfg.truncate_chars).truncated {
            trace.note(Stage::Detection, format!("truncated target: {field}"));
        }
        trace.detection_raw = detection.raw_outputs.clone();
        if let Some(fallback) = &detection.fallback {
            trace.error(Stage::Detection, fallback.clone());
        }
        let keywords = detection.keywords;
        trace.keyword_set = Some(keywords.clone());

        let mode = self.config.mode;
        let (inside, outside) = std::thread::scope(|s| {
            let inside = (mode != PipelineMode::OutsideOnly)
                .then(|| s.spawn(|| self.inside_path(article, &digest, &keywords)));
            let outside = (mode != PipelineMode::InsideOnly)
                .then(|| self.outside_path(article, &digest, &keywords));
            let inside = inside.map(|h| h.join().expect("inside path panicked"));
            (inside.unwrap_or_default(), outside.unwrap_or_default())
        });
        for path in [inside, outside] {
            if path.demonstrations.is_some() {
                trace.demonstrations = path.demonstrations;
            }
            if path.evidence.is_some() {
                trace.evidence = path.evidence;
            }
            if let Some(j) = path.judgement {
                match j.perspective {
                    crate::domain::Perspective::Inside => trace.inside_judgement = Some(j),
                    crate::domain::Perspective::Outside => trace.outside_judgement = Some(j),
                }
            }
            trace.stage_errors.extend(path.errors);
            trace.notes.extend(path.notes);
            for (stage, ms) in path.timings {
                record_timing(&mut trace, stage, ms);
            }
        }

        let started = Instant::now();
        let key = StageCache::key(&[
            "determination",
            &digest,
            &json(&trace.inside_judgement),
            &json(&trace.outside_judgement),
            &json(&self.config.conflict_fallback),
            &self.judge_fingerprint(),
            &self.gateway.fingerprint(),
        ]);
        let outcome = self.cached(
            Stage::Determination,
            &key,
            || {
                determine(
                    article,
                    trace.inside_judgement.as_ref(),
                    trace.outside_judgement.as_ref(),
                    &self.gateway,
                    self.config.conflict_fallback,
                    &self.config.judge,
                )
                .map(|o: DeterminationOutcome| (o.verdict, o.stage_error))
            },
            // A selector failure is retried on the next run rather than cached.
            |(_, err): &(Verdict, Option<String>)| err.is_none(),
        );
        record_timing(&mut trace, Stage::Determination, started.elapsed().as_millis() as u64);
        match outcome {
            Ok((verdict, stage_error)) => {
                if let Some(e) = stage_error {
                    trace.error(Stage::Determination, e);
                }
                trace.verdict = Some(verdict);
            }
            Err(e) => trace.error(Stage::Determination, e.to_string()),
        }
        trace
    }

    /// Runs every article on up to `workers` threads. Traces come back in
    /// input order; `on_done` sees each one as it completes.
    pub fn run_batch(
        &self,
        articles: &[NewsArticle],
        workers: usize,
        on_done: &(dyn Fn(&PipelineTrace) + Sync),
    ) -> Vec<PipelineTrace> {
        let slots: Vec<Mutex<Option<PipelineTrace>>> = articles.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers.clamp(1, articles.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(article) = articles.get(i) else { break };
                    let trace = self.run_article(article);
                    on_done(&trace);
                    *slots[i].lock().unwrap() = Some(trace);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every article ran"))
            .collect()
    }
}
