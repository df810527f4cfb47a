//! Shared vocabulary of the pipeline: articles, labels, keywords, evidence,
//! judgements, verdicts and the per-article run trace.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inside::Demonstrations;

/// Bumped whenever a change to prompts or stage semantics should invalidate
/// previously cached stage outputs.
pub const SCHEMA_VERSION: &str = "newsverdict-pipeline-v1";

/// Separator used wherever an article's tweets are rendered as one field.
pub const TWEET_SEPARATOR: &str = "; ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: article {id:?} has neither title nor text")]
    EmptyArticle {
        path: String,
        line: usize,
        id: String,
    },
    #[error("duplicate article id {0:?}")]
    DuplicateId(String),
}

/// Binary news label. `Fake` is the positive class for all metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Fake
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown label {0:?}, expected \"real\" or \"fake\"")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("real") {
            Ok(Label::Real)
        } else if t.eq_ignore_ascii_case("fake") {
            Ok(Label::Fake)
        } else {
            Err(ParseLabelError(s.to_string()))
        }
    }
}

/// One news item: title, body text and related tweets, plus the gold label
/// when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsArticle {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "text", default)]
    pub body: String,
    #[serde(default)]
    pub tweets: Vec<String>,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
}

impl NewsArticle {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        NewsArticle {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            tweets: Vec::new(),
            gold_label: None,
        }
    }

    pub fn with_tweets<I, S>(mut self, tweets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tweets = tweets.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn is_valid(&self) -> bool {
        !(self.title.trim().is_empty() && self.body.trim().is_empty())
    }

    /// Tweets joined into the single field used by every prompt.
    pub fn joined_tweets(&self) -> String {
        self.tweets.join(TWEET_SEPARATOR)
    }
}

/// Content hash over title, body, tweets and the pipeline schema version.
///
/// Every field is length-prefixed, so an empty tweet list and a list holding
/// one empty tweet hash differently.
pub fn article_digest(article: &NewsArticle) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(SCHEMA_VERSION.as_bytes());
    field(article.title.as_bytes());
    field(article.body.as_bytes());
    field(&(article.tweets.len() as u64).to_le_bytes());
    for tweet in &article.tweets {
        field(tweet.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// SHA-256 of arbitrary text, hex encoded.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Keywords extracted by the detection stage, in model order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<String>,
    pub source_article_id: String,
}

impl KeywordSet {
    pub fn new(source_article_id: impl Into<String>, keywords: Vec<String>) -> Self {
        KeywordSet {
            keywords,
            source_article_id: source_article_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    /// Keywords concatenated with single spaces.
    pub fn joined(&self) -> String {
        self.keywords.join(" ")
    }
}

/// Outside evidence for one article. An empty snippet is the
/// "nothing retrieved" sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub snippet: String,
    pub source_title: Option<String>,
    pub source_url: Option<String>,
    pub query_used: String,
}

impl Evidence {
    pub fn empty(query_used: impl Into<String>) -> Self {
        Evidence {
            snippet: String::new(),
            source_title: None,
            source_url: None,
            query_used: query_used.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.snippet.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Inside,
    Outside,
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perspective::Inside => "inside",
            Perspective::Outside => "outside",
        })
    }
}

/// A verdict plus explanation from one perspective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub verdict: Label,
    pub explanation: String,
    pub perspective: Perspective,
    pub raw_model_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Agreement,
    DeterminationSelector,
    SinglePerspectiveFallback,
}

impl fmt::Display for DecidedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecidedBy::Agreement => "agreement",
            DecidedBy::DeterminationSelector => "determination selector",
            DecidedBy::SinglePerspectiveFallback => "single-perspective fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(rename = "final")]
    pub final_label: Label,
    pub decided_by: DecidedBy,
    pub raw_model_output: Option<String>,
}

/// Pipeline stage names, used for trace bookkeeping and cache keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detection,
    InsideInvestigation,
    OutsideInvestigation,
    InsideJudge,
    OutsideJudge,
    Determination,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Detection,
        Stage::InsideInvestigation,
        Stage::OutsideInvestigation,
        Stage::InsideJudge,
        Stage::OutsideJudge,
        Stage::Determination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Detection => "detection",
            Stage::InsideInvestigation => "inside_investigation",
            Stage::OutsideInvestigation => "outside_investigation",
            Stage::InsideJudge => "inside_judge",
            Stage::OutsideJudge => "outside_judge",
            Stage::Determination => "determination",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A stage-scoped message: an error for `stage_errors`, or an informational
/// note (truncation, short demonstration lists).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageNote {
    pub stage: Stage,
    pub message: String,
}

impl StageNote {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        StageNote {
            stage,
            message: message.into(),
        }
    }
}

/// Every intermediate artifact of one article's run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub article_id: String,
    pub article_digest: String,
    pub keyword_set: Option<KeywordSet>,
    /// Raw detection completions, one per attempt, verbatim.
    #[serde(default)]
    pub detection_raw: Vec<String>,
    pub demonstrations: Option<Demonstrations>,
    pub evidence: Option<Evidence>,
    pub inside_judgement: Option<Judgement>,
    pub outside_judgement: Option<Judgement>,
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub stage_errors: Vec<StageNote>,
    #[serde(default)]
    pub notes: Vec<StageNote>,
    /// Per-stage wall-clock durations in milliseconds.
    #[serde(default)]
    pub timings: BTreeMap<Stage, u64>,
}

impl PipelineTrace {
    pub fn new(article: &NewsArticle) -> Self {
        PipelineTrace {
            article_id: article.id.clone(),
            article_digest: article_digest(article),
            ..Default::default()
        }
    }

    pub fn error(&mut self, stage: Stage, message: impl Into<String>) {
        self.stage_errors.push(StageNote::new(stage, message));
    }

    pub fn note(&mut self, stage: Stage, message: impl Into<String>) {
        self.notes.push(StageNote::new(stage, message));
    }

    pub fn has_error(&self, stage: Stage) -> bool {
        self.stage_errors.iter().any(|e| e.stage == stage)
    }

    /// Copy with timing fields cleared, for comparisons across runs.
    pub fn without_timings(&self) -> PipelineTrace {
        PipelineTrace {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<PipelineTrace> {
        serde_json::from_str(s)
    }
}

/// Reads a line-delimited article file. Blank lines are skipped.
pub fn load_articles(path: impl AsRef<Path>) -> Result<Vec<NewsArticle>, DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut articles = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let article: NewsArticle =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                path: display.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !article.is_valid() {
            return Err(DatasetError::EmptyArticle {
                path: display.clone(),
                line: idx + 1,
                id: article.id,
            });
        }
        if !seen.insert(article.id.clone()) {
            return Err(DatasetError::DuplicateId(article.id));
        }
        articles.push(article);
    }
    Ok(articles)
}

pub fn write_articles(path: impl AsRef<Path>, articles: &[NewsArticle]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for a in articles {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
