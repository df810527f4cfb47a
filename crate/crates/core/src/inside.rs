//! Inside investigation: embed keyword strings, keep the labeled datastore of
//! few-shot training articles, and pull the k nearest fake and k nearest real
//! neighbors of a query by Euclidean distance.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::detection::{detect, DetectionConfig};
use crate::domain::{text_digest, KeywordSet, Label, NewsArticle};
use crate::llm::Gateway;

#[derive(Debug, Error)]
pub enum InsideError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("cannot embed an empty keyword set")]
    EmptyKeywords,
    #[error("refusing to build an empty datastore")]
    RefuseEmptyDatastore,
    #[error("training article {0:?} has no gold label")]
    MissingGoldLabel(String),
    #[error("datastore was built by {stored:?} but the configured provider is {configured:?}")]
    FingerprintMismatch { stored: String, configured: String },
    #[error("datastore file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("datastore io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fixed-length, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, InsideError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(InsideError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn euclidean(&self, other: &EmbeddingVector) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Text encoder used for keyword strings.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Identifies provider, model and pooling; stored with every datastore.
    fn fingerprint(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, InsideError>;
}

/// Offline provider: L2-normalized histogram of character n-grams.
///
/// Each n-gram hashes to bin `(Σ c_i·31^(n-1-i)) mod dim` over its code
/// points, so for unigrams the bin is just `codepoint mod dim`.
#[derive(Debug, Clone)]
pub struct CharHistogramEmbedder {
    dim: usize,
    ngram: usize,
}

impl CharHistogramEmbedder {
    pub fn new(dim: usize, ngram: usize) -> Self {
        assert!(dim > 0 && ngram > 0, "dim and ngram must be positive");
        CharHistogramEmbedder { dim, ngram }
    }
}

impl Default for CharHistogramEmbedder {
    fn default() -> Self {
        CharHistogramEmbedder::new(16, 1)
    }
}

impl EmbeddingProvider for CharHistogramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("char-histogram:n={}:dim={}:v1", self.ngram, self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, InsideError> {
        let chars: Vec<u64> = text.chars().map(|c| c as u64).collect();
        let mut bins = vec![0.0; self.dim];
        for window in chars.windows(self.ngram) {
            let h = window
                .iter()
                .fold(0u64, |h, &c| h.wrapping_mul(31).wrapping_add(c));
            bins[(h % self.dim as u64) as usize] += 1.0;
        }
        let norm = bins.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            bins.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(bins)
    }
}

/// Live encoder endpoint returning one mean-pooled vector per input.
///
/// Sends `{"inputs": text}`; accepts `[[..]]`, `[..]`, `{"embeddings": [[..]]}`
/// or `{"data": [{"embedding": [..]}]}`.
pub struct HttpEncoder {
    endpoint_url: String,
    model: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEncoder {
    pub fn new(endpoint_url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        HttpEncoder {
            endpoint_url: endpoint_url.into(),
            model: model.into(),
            dim,
            agent,
        }
    }
}

/// Accepts a pooled vector, a per-token matrix (mean-pooled over tokens) or
/// either wrapped in a single-item batch, bare or under `embeddings` /
/// `data[0].embedding`.
pub fn parse_embedding_response(body: &str) -> Result<Vec<f64>, InsideError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| InsideError::Provider(format!("invalid JSON: {e}")))?;
    let mut candidate = if v.is_array() {
        &v
    } else if v["embeddings"].is_array() {
        &v["embeddings"]
    } else {
        &v["data"][0]["embedding"]
    };
    // Unwrap batch levels until rows hold numbers.
    while candidate[0][0].is_array() {
        candidate = &candidate[0];
    }
    let numbers = |row: &serde_json::Value| -> Result<Vec<f64>, InsideError> {
        row.as_array()
            .ok_or_else(|| InsideError::Provider("response holds no embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| InsideError::Provider("embedding holds a non-number".into()))
            })
            .collect()
    };
    if !candidate[0].is_array() {
        return numbers(candidate);
    }
    let rows = candidate
        .as_array()
        .expect("indexed as an array")
        .iter()
        .map(numbers)
        .collect::<Result<Vec<_>, _>>()?;
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(InsideError::Provider("token vectors differ in length".into()));
    }
    let mut mean = vec![0.0; dim];
    for row in &rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = rows.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

impl EmbeddingProvider for HttpEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("http-encoder:{}@{}:mean-pool:dim={}", self.model, self.endpoint_url, self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, InsideError> {
        let mut resp = self
            .agent
            .post(&self.endpoint_url)
            .send_json(json!({ "inputs": text, "model": self.model }))
            .map_err(|e| InsideError::Provider(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| InsideError::Provider(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(InsideError::Provider(format!("HTTP {status}")));
        }
        parse_embedding_response(&body)
    }
}

/// Joins keywords with single spaces, trims the result and embeds it.
pub fn embed_keywords(
    keywords: &KeywordSet,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingVector, InsideError> {
    if keywords.is_empty() {
        return Err(InsideError::EmptyKeywords);
    }
    let joined = keywords.joined();
    let values = provider.embed(joined.trim())?;
    if values.len() != provider.dim() {
        return Err(InsideError::DimensionMismatch {
            expected: provider.dim(),
            got: values.len(),
        });
    }
    EmbeddingVector::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatastoreEntry {
    #[serde(rename = "id")]
    pub article_id: String,
    pub label: Label,
    pub vector: EmbeddingVector,
    pub article: NewsArticle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatastoreHeader {
    format: String,
    dim: usize,
    fingerprint: String,
    count: usize,
}

const DATASTORE_FORMAT: &str = "newsverdict-datastore-v1";

/// Labeled keyword embeddings of the few-shot training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    entries: Vec<DatastoreEntry>,
    dim: usize,
    provider_fingerprint: String,
}

impl Datastore {
    pub fn new(
        entries: Vec<DatastoreEntry>,
        dim: usize,
        provider_fingerprint: impl Into<String>,
    ) -> Result<Self, InsideError> {
        if let Some(bad) = entries.iter().find(|e| e.vector.dim() != dim) {
            return Err(InsideError::DimensionMismatch {
                expected: dim,
                got: bad.vector.dim(),
            });
        }
        Ok(Datastore {
            entries,
            dim,
            provider_fingerprint: provider_fingerprint.into(),
        })
    }

    pub fn entries(&self) -> &[DatastoreEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Serialized form: a header line, then one line per entry.
    pub fn to_jsonl(&self) -> String {
        let header = DatastoreHeader {
            format: DATASTORE_FORMAT.into(),
            dim: self.dim,
            fingerprint: self.provider_fingerprint.clone(),
            count: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Hash of the serialized store; part of inside-stage cache keys.
    pub fn content_digest(&self) -> String {
        text_digest(&self.to_jsonl())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InsideError> {
        let path = path.as_ref();
        let io = |source| InsideError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Loads a store and checks it was produced by the configured provider.
    pub fn load(path: impl AsRef<Path>, expected_fingerprint: Option<&str>) -> Result<Self, InsideError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let malformed = |message: String| InsideError::Malformed {
            path: display.clone(),
            message,
        };
        let file = File::open(path).map_err(|source| InsideError::Io {
            path: display.clone(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| malformed("empty file".into()))?
            .map_err(|source| InsideError::Io {
                path: display.clone(),
                source,
            })?;
        let header: DatastoreHeader =
            serde_json::from_str(&header_line).map_err(|e| malformed(format!("header: {e}")))?;
        if header.format != DATASTORE_FORMAT {
            return Err(malformed(format!("unknown format {:?}", header.format)));
        }
        if let Some(expected) = expected_fingerprint {
            if expected != header.fingerprint {
                return Err(InsideError::FingerprintMismatch {
                    stored: header.fingerprint,
                    configured: expected.to_string(),
                });
            }
        }
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|source| InsideError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: DatastoreEntry =
                serde_json::from_str(&line).map_err(|e| malformed(format!("entry {}: {e}", i + 1)))?;
            if entry.vector.values().iter().any(|v| !v.is_finite()) {
                return Err(InsideError::NonFinite);
            }
            entries.push(entry);
        }
        if entries.len() != header.count {
            return Err(malformed(format!(
                "header declares {} entries, found {}",
                header.count,
                entries.len()
            )));
        }
        Datastore::new(entries, header.dim, header.fingerprint)
    }
}

/// Result of [`build_datastore`] with per-article warnings.
#[derive(Debug, Clone)]
pub struct DatastoreBuild {
    pub store: Datastore,
    pub warnings: Vec<String>,
}

/// Runs detection and keyword embedding over every training article.
///
/// Articles whose detection hard-fails are skipped with a warning. Embedding
/// runs on up to `workers` threads; entries keep input order.
pub fn build_datastore(
    training: &[NewsArticle],
    detection: &DetectionConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
    workers: usize,
) -> Result<DatastoreBuild, InsideError> {
    if training.is_empty() {
        return Err(InsideError::RefuseEmptyDatastore);
    }
    let mut labels = Vec::with_capacity(training.len());
    for a in training {
        labels.push(a.gold_label.ok_or_else(|| InsideError::MissingGoldLabel(a.id.clone()))?);
    }

    type Slot = Result<(EmbeddingVector, Option<String>), String>;
    let slots: Vec<std::sync::Mutex<Option<Slot>>> =
        training.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let fatal: std::sync::Mutex<Option<InsideError>> = std::sync::Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, training.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= training.len() || fatal.lock().unwrap().is_some() {
                    break;
                }
                let article = &training[i];
                let slot = match detect(article, detection, gateway) {
                    Ok(outcome) => match embed_keywords(&outcome.keywords, provider) {
                        Ok(v) => Ok((v, outcome.fallback)),
                        Err(e) => {
                            *fatal.lock().unwrap() = Some(e);
                            break;
                        }
                    },
                    Err(e) => Err(e.to_string()),
                };
                *slots[i].lock().unwrap() = Some(slot);
            });
        }
    });
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for ((article, label), slot) in training.iter().zip(labels).zip(slots) {
        match slot.into_inner().unwrap() {
            Some(Ok((vector, fallback))) => {
                if let Some(note) = fallback {
                    warnings.push(format!("{}: {note}", article.id));
                }
                entries.push(DatastoreEntry {
                    article_id: article.id.clone(),
                    label,
                    vector,
                    article: article.clone(),
                });
            }
            Some(Err(message)) => {
                log::warn!("skipping training article {}: {message}", article.id);
                warnings.push(format!("{}: skipped, detection failed: {message}", article.id));
            }
            None => unreachable!("every slot is filled when no fatal error occurred"),
        }
    }
    if entries.is_empty() {
        return Err(InsideError::RefuseEmptyDatastore);
    }
    let store = Datastore::new(entries, provider.dim(), provider.fingerprint())?;
    for label in Label::ALL {
        if store.count(label) == 0 {
            warnings.push(format!("datastore has no {label} entries; {label} demonstrations will be empty"));
        }
    }
    Ok(DatastoreBuild { store, warnings })
}

/// One retrieved neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub article: NewsArticle,
    pub label: Label,
    pub distance: f64,
}

/// The k nearest fake (`positive`) and k nearest real (`negative`) neighbors,
/// each ascending by distance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Demonstrations {
    pub positive: Vec<Demonstration>,
    pub negative: Vec<Demonstration>,
}

impl Demonstrations {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    /// Prompt order: real₁, fake₁, real₂, fake₂, … then whichever list is
    /// longer.
    pub fn interleaved(&self) -> Vec<&Demonstration> {
        let n = self.positive.len().max(self.negative.len());
        let mut out = Vec::with_capacity(self.len());
        for i in 0..n {
            out.extend(self.negative.get(i));
            out.extend(self.positive.get(i));
        }
        out
    }

    /// Warnings for classes that yielded fewer than `k` neighbors.
    pub fn shortfall_warnings(&self, k: usize) -> Vec<String> {
        [(Label::Fake, self.positive.len()), (Label::Real, self.negative.len())]
            .into_iter()
            .filter(|(_, n)| *n < k)
            .map(|(label, n)| format!("only {n} {label} demonstration(s) available for k={k}"))
            .collect()
    }
}

/// Exact class-balanced kNN by linear scan.
///
/// Ties on distance break by ascending article id, so the result does not
/// depend on entry order.
pub fn knn_retrieve(
    query: &EmbeddingVector,
    store: &Datastore,
    k: usize,
) -> Result<Demonstrations, InsideError> {
    if query.dim() != store.dim() {
        return Err(InsideError::DimensionMismatch {
            expected: store.dim(),
            got: query.dim(),
        });
    }
    let mut fakes: Vec<(f64, &DatastoreEntry)> = Vec::new();
    let mut reals: Vec<(f64, &DatastoreEntry)> = Vec::new();
    for entry in store.entries() {
        let d = query.euclidean(&entry.vector);
        match entry.label {
            Label::Fake => fakes.push((d, entry)),
            Label::Real => reals.push((d, entry)),
        }
    }
    let nearest = |mut v: Vec<(f64, &DatastoreEntry)>| -> Vec<Demonstration> {
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.article_id.cmp(&b.1.article_id)));
        v.into_iter()
            .take(k)
            .map(|(distance, e)| Demonstration {
                article: e.article.clone(),
                label: e.label,
                distance,
            })
            .collect()
    };
    Ok(Demonstrations {
        positive: nearest(fakes),
        negative: nearest(reals),
    })
}
