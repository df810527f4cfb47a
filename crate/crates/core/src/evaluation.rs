//! K-shot split sampling, batch evaluation and fake-as-positive metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{text_digest, Label, NewsArticle, PipelineTrace};
use crate::outside::write_atomic;
use crate::pipeline::PipelineContext;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k_per_class: usize,
    pub seed: u64,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("need {needed} {label} articles for the training split, found {found}")]
    InsufficientClassCount { label: Label, needed: usize, found: usize },
    #[error("article {0:?} has no gold label")]
    MissingGoldLabel(String),
    #[error("article {0:?} appears in both the pool and the fixed test partition")]
    Overlap(String),
    #[error("k_per_class must be positive")]
    ZeroK,
}

/// Labeled articles to sample training shots from, plus an optional fixed
/// test partition that is never sampled from or reordered.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pool: Vec<NewsArticle>,
    pub test: Option<Vec<NewsArticle>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<NewsArticle>,
    pub test: Vec<NewsArticle>,
}

fn split_rng(spec: &SplitSpec) -> ChaCha8Rng {
    let digest = text_digest(&format!("{}\u{1f}{}", spec.dataset_id, spec.seed));
    let mut seed = [0u8; 32];
    hex::decode_to_slice(&digest, &mut seed).expect("sha256 hex is 32 bytes");
    ChaCha8Rng::from_seed(seed)
}

/// Draws `k_per_class` training articles per label. The result depends only
/// on the split spec and the pool's contents, not on the pool's order.
pub fn sample_split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, SplitError> {
    if spec.k_per_class == 0 {
        return Err(SplitError::ZeroK);
    }
    for a in dataset.pool.iter().chain(dataset.test.iter().flatten()) {
        if a.gold_label.is_none() {
            return Err(SplitError::MissingGoldLabel(a.id.clone()));
        }
    }
    if let Some(test) = &dataset.test {
        let test_ids: HashSet<&str> = test.iter().map(|a| a.id.as_str()).collect();
        if let Some(a) = dataset.pool.iter().find(|a| test_ids.contains(a.id.as_str())) {
            return Err(SplitError::Overlap(a.id.clone()));
        }
    }

    let mut rng = split_rng(spec);
    let mut train = Vec::with_capacity(2 * spec.k_per_class);
    for label in Label::ALL {
        let mut class: Vec<&NewsArticle> =
            dataset.pool.iter().filter(|a| a.gold_label == Some(label)).collect();
        if class.len() < spec.k_per_class {
            return Err(SplitError::InsufficientClassCount {
                label,
                needed: spec.k_per_class,
                found: class.len(),
            });
        }
        class.sort_by(|a, b| a.id.cmp(&b.id));
        class.shuffle(&mut rng);
        train.extend(class.into_iter().take(spec.k_per_class).cloned());
    }

    let test = match &dataset.test {
        Some(test) => test.clone(),
        None => {
            let train_ids: HashSet<&str> = train.iter().map(|a| a.id.as_str()).collect();
            dataset
                .pool
                .iter()
                .filter(|a| !train_ids.contains(a.id.as_str()))
                .cloned()
                .collect()
        }
    };
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub n_evaluated: u64,
    pub n_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no predictions to score")]
    EmptyInput,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `(predicted, gold)` pairs with Fake as the positive class.
pub fn compute_metrics(pairs: &[(Label, Label)]) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut c = Confusion::default();
    for &(pred, gold) in pairs {
        match (pred.is_positive(), gold.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let n = pairs.len() as u64;
    Ok(MetricsReport {
        accuracy: ratio(c.tp + c.tn, n),
        precision,
        recall,
        f1,
        confusion: c,
        n_evaluated: n,
        n_failed: 0,
    })
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("article {0:?} has no gold label")]
    MissingGoldLabel(String),
    #[error("no test articles")]
    EmptyTestSet,
    #[error("failed to write trace for {id:?}: {message}")]
    TraceWrite { id: String, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub workers: usize,
    /// When set, each trace is written here as soon as its article finishes.
    pub traces_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// In test-set order.
    pub traces: Vec<PipelineTrace>,
}

/// File name for an article's trace; ids that are not filesystem-safe get a
/// digest suffix so distinct ids never collide.
pub fn trace_file_name(article_id: &str) -> String {
    let safe: String = article_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if safe == article_id && !safe.is_empty() {
        format!("{safe}.json")
    } else {
        format!("{safe}-{}.json", &text_digest(article_id)[..12])
    }
}

/// Runs the pipeline over `test` and scores it. Articles without a verdict
/// count as failed and are scored as the opposite of their gold label.
pub fn evaluate(
    test: &[NewsArticle],
    context: &PipelineContext,
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let golds = test
        .iter()
        .map(|a| a.gold_label.ok_or_else(|| EvalError::MissingGoldLabel(a.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let write_errors: Mutex<Vec<EvalError>> = Mutex::new(Vec::new());
    let on_done = |trace: &PipelineTrace| {
        let Some(dir) = &options.traces_dir else { return };
        let path = dir.join(trace_file_name(&trace.article_id));
        if let Err(e) = write_atomic(&path, trace.to_json().as_bytes()) {
            write_errors.lock().unwrap().push(EvalError::TraceWrite {
                id: trace.article_id.clone(),
                message: e.to_string(),
            });
        }
    };
    let traces = context.run_batch(test, options.workers.max(1), &on_done);
    if let Some(e) = write_errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }

    let mut n_failed = 0;
    let pairs: Vec<(Label, Label)> = traces
        .iter()
        .zip(&golds)
        .map(|(trace, &gold)| match &trace.verdict {
            Some(v) => (v.final_label, gold),
            None => {
                n_failed += 1;
                (gold.opposite(), gold)
            }
        })
        .collect();
    let mut report = compute_metrics(&pairs).expect("test set is non-empty");
    report.n_failed = n_failed;
    Ok(Evaluation { report, traces })
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset_id: String,
    pub k_per_class: usize,
    pub seed: u64,
    pub k_neighbors: usize,
    pub mode: String,
    pub n_train: usize,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    #[serde(flatten)]
    run: &'a RunInfo,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

/// One JSON object, no trailing newline.
pub fn report_line(run: &RunInfo, report: &MetricsReport) -> String {
    serde_json::to_string(&ReportLine { run, metrics: report }).expect("report serializes")
}

pub fn report_table(run: &RunInfo, report: &MetricsReport) -> String {
    let c = &report.confusion;
    let mut out = String::new();
    let _ = writeln!(out, "dataset      {}", run.dataset_id);
    let _ = writeln!(out, "K-shot       {} per class ({} train)", run.k_per_class, run.n_train);
    let _ = writeln!(out, "seed         {}", run.seed);
    let _ = writeln!(out, "neighbors    {} per class", run.k_neighbors);
    let _ = writeln!(out, "mode         {}", run.mode);
    let _ = writeln!(out);
    let _ = writeln!(out, "ACC          {:.4}", report.accuracy);
    let _ = writeln!(out, "F1           {:.4}", report.f1);
    let _ = writeln!(out, "precision    {:.4}", report.precision);
    let _ = writeln!(out, "recall       {:.4}", report.recall);
    let _ = writeln!(out);
    let _ = writeln!(out, "               gold fake  gold real");
    let _ = writeln!(out, "pred fake      {:>9}  {:>9}", c.tp, c.fp);
    let _ = writeln!(out, "pred real      {:>9}  {:>9}", c.fn_, c.tn);
    let _ = writeln!(out);
    let _ = writeln!(out, "evaluated    {}", report.n_evaluated);
    let _ = writeln!(out, "failed       {}", report.n_failed);
    out
}
