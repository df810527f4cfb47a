//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or backend error, 2 dataset error,
//! 3 too many articles without a verdict.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, Settings};
use crate::domain::{load_articles, DatasetError, NewsArticle, PipelineTrace};
use crate::evaluation::{
    evaluate, report_line, report_table, sample_split, Dataset, EvalOptions, RunInfo, SplitError, SplitSpec,
};
use crate::inside::{Datastore, InsideError};
use crate::llm::{CallLedger, ChatBackend, Gateway, RecordingBackend, StageTag};
use crate::outside::{write_atomic, RecordingSearchClient, SearchClient};
use crate::pipeline::{build_datastore_cached, PipelineContext, StageCache};

#[derive(Debug, Parser)]
#[command(name = "newsverdict", version, about = "Few-shot fake-news detection from inside and outside evidence")]
pub struct Cli {
    /// Log verbosity: -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Configuration file.
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the labeled keyword datastore from a training file.
    BuildStore {
        #[command(flatten)]
        config: ConfigArg,
        /// Labeled training articles, one record per line.
        #[arg(long)]
        train: PathBuf,
        /// Output path; defaults to inside.store_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one article through the pipeline and print every stage.
    Detect {
        #[command(flatten)]
        config: ConfigArg,
        /// File holding a single article record.
        #[arg(long)]
        article: PathBuf,
        /// Also write the full trace as JSON here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Sample a K-shot split, run the test set and report ACC/F1.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Labeled articles to sample training shots from.
        #[arg(long)]
        dataset: PathBuf,
        /// Fixed test partition; without it every unsampled article is tested.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Training articles per class.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Name mixed into the split seed; defaults to the dataset file stem.
        #[arg(long)]
        dataset_id: Option<String>,
        /// Directory for report.txt, report.jsonl, split.json and traces/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect or clear the stage cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Run articles against the live backends and record every model and
    /// search response as replayable fixtures.
    Fixtures {
        #[command(flatten)]
        config: ConfigArg,
        /// Articles to run.
        #[arg(long)]
        articles: PathBuf,
        /// Training articles; without it inside.store_path is loaded.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Receives chat.jsonl, search.jsonl and, with --train, datastore.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    Inspect {
        #[command(flatten)]
        config: ConfigArg,
    },
    Clear {
        #[command(flatten)]
        config: ConfigArg,
        /// Also clear search.cache_dir.
        #[arg(long)]
        search: bool,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Backend(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("{0}")]
    DatasetOther(String),
    #[error("{failed} of {total} articles produced no verdict (threshold {threshold})")]
    FailureRate { failed: u64, total: u64, threshold: f64 },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Backend(_) | CliError::Output { .. } => 1,
            CliError::Dataset(_) | CliError::Split(_) | CliError::DatasetOther(_) => 2,
            CliError::FailureRate { .. } => 3,
        }
    }
}

impl From<InsideError> for CliError {
    fn from(e: InsideError) -> Self {
        match e {
            InsideError::RefuseEmptyDatastore | InsideError::MissingGoldLabel(_) => {
                CliError::DatasetOther(e.to_string())
            }
            other => CliError::Backend(other.to_string()),
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    write_atomic(path, contents.as_bytes()).map_err(output_err(path))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::BuildStore { config, train, out } => build_store(&config.config, &train, out),
        Command::Detect {
            config,
            article,
            trace_out,
        } => detect(&config.config, &article, trace_out),
        Command::Eval {
            config,
            dataset,
            test,
            k,
            seed,
            dataset_id,
            out,
        } => {
            let dataset_id = dataset_id.unwrap_or_else(|| {
                dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let spec = SplitSpec {
                k_per_class: k,
                seed,
                dataset_id,
            };
            eval(&config.config, &dataset, test.as_deref(), &spec, &out)
        }
        Command::Cache { action } => cache(action),
        Command::Fixtures {
            config,
            articles,
            train,
            out_dir,
        } => fixtures(&config.config, &articles, train.as_deref(), &out_dir),
    }
}

fn stage_cache(settings: &Settings) -> Option<StageCache> {
    settings.cache_dir.as_ref().map(StageCache::new)
}

fn ledger_summary(ledger: &CallLedger) -> String {
    let parts: Vec<String> = StageTag::ALL
        .iter()
        .map(|&t| format!("{} {}", t.as_str(), ledger.stage(t).requests))
        .collect();
    format!(
        "model calls: {} (retries {})",
        parts.join(", "),
        ledger.total_retries()
    )
}

fn build_store(config: &Path, train: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let settings = Settings::load(config)?;
    let out = out.or_else(|| settings.store_path.clone()).ok_or_else(|| ConfigError::Missing {
        key: "inside.store_path".into(),
        hint: "set it in the config or pass --out".into(),
    })?;
    let articles = load_articles(train)?;
    let gateway = settings.gateway()?;
    let provider = settings.embedder()?;
    let cache = stage_cache(&settings);
    let build = build_datastore_cached(
        &articles,
        &settings.pipeline.detection,
        provider.as_ref(),
        &gateway,
        settings.workers,
        cache.as_ref(),
    )?;
    for w in &build.warnings {
        log::warn!("{w}");
    }
    build.store.save(&out)?;
    println!(
        "wrote {} entries ({} real, {} fake) to {}",
        build.store.len(),
        build.store.count(crate::Label::Real),
        build.store.count(crate::Label::Fake),
        out.display()
    );
    eprintln!("{}", ledger_summary(&gateway.ledger_snapshot()));
    Ok(())
}

fn load_store(settings: &Settings, fingerprint: &str) -> Result<Datastore, CliError> {
    let path = settings.store_path.as_ref().ok_or_else(|| ConfigError::Missing {
        key: "inside.store_path".into(),
        hint: "build one with `newsverdict build-store` and point the config at it".into(),
    })?;
    Ok(Datastore::load(path, Some(fingerprint))?)
}

fn context(settings: &Settings, gateway: Gateway, search: Arc<dyn SearchClient>, store: Datastore) -> Result<PipelineContext, CliError> {
    Ok(PipelineContext {
        config: settings.pipeline.clone(),
        gateway: Arc::new(gateway),
        store: Arc::new(store),
        provider: settings.embedder()?,
        search: Arc::new(settings.cached_search_with(search)),
        cache: stage_cache(settings),
    })
}

fn detect(config: &Path, article: &Path, trace_out: Option<PathBuf>) -> Result<(), CliError> {
    let settings = Settings::load(config)?;
    let mut articles = load_articles(article)?;
    if articles.len() != 1 {
        return Err(CliError::DatasetOther(format!(
            "{} holds {} articles; detect takes exactly one",
            article.display(),
            articles.len()
        )));
    }
    let article = articles.remove(0);
    let provider = settings.embedder()?;
    let store = load_store(&settings, &provider.fingerprint())?;
    let ctx = context(&settings, settings.gateway()?, settings.search_client()?, store)?;
    let trace = ctx.run_article(&article);
    if let Some(path) = trace_out {
        write_file(&path, &trace.to_json())?;
    }
    print!("{}", render_case(&article, &trace));
    eprintln!("{}", ledger_summary(&ctx.gateway.ledger_snapshot()));
    if trace.verdict.is_none() {
        return Err(CliError::FailureRate {
            failed: 1,
            total: 1,
            threshold: settings.max_failure_rate,
        });
    }
    Ok(())
}

fn eval(config: &Path, dataset: &Path, test: Option<&Path>, spec: &SplitSpec, out: &Path) -> Result<(), CliError> {
    let settings = Settings::load(config)?;
    let data = Dataset {
        pool: load_articles(dataset)?,
        test: test.map(load_articles).transpose()?,
    };
    let split = sample_split(&data, spec)?;
    let gateway = settings.gateway()?;
    let provider = settings.embedder()?;
    let cache = stage_cache(&settings);
    let build = build_datastore_cached(
        &split.train,
        &settings.pipeline.detection,
        provider.as_ref(),
        &gateway,
        settings.workers,
        cache.as_ref(),
    )?;
    for w in &build.warnings {
        log::warn!("{w}");
    }
    let ctx = context(&settings, gateway, settings.search_client()?, build.store)?;

    let traces_dir = out.join("traces");
    if traces_dir.exists() {
        std::fs::remove_dir_all(&traces_dir).map_err(output_err(&traces_dir))?;
    }
    std::fs::create_dir_all(&traces_dir).map_err(output_err(&traces_dir))?;
    let options = EvalOptions {
        workers: settings.workers,
        traces_dir: Some(traces_dir),
    };
    let evaluation = evaluate(&split.test, &ctx, &options).map_err(|e| match e {
        crate::evaluation::EvalError::TraceWrite { .. } => CliError::Output {
            path: out.to_path_buf(),
            message: e.to_string(),
        },
        other => CliError::DatasetOther(other.to_string()),
    })?;

    let run = RunInfo {
        dataset_id: spec.dataset_id.clone(),
        k_per_class: spec.k_per_class,
        seed: spec.seed,
        k_neighbors: settings.pipeline.k,
        mode: serde_json::to_value(settings.pipeline.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        n_train: split.train.len(),
    };
    let table = report_table(&run, &evaluation.report);
    write_file(&out.join("report.txt"), &table)?;
    write_file(&out.join("report.jsonl"), &(report_line(&run, &evaluation.report) + "\n"))?;
    let ids = |v: &[NewsArticle]| v.iter().map(|a| a.id.clone()).collect::<Vec<_>>();
    let split_json = serde_json::json!({ "train": ids(&split.train), "test": ids(&split.test) });
    write_file(&out.join("split.json"), &(serde_json::to_string_pretty(&split_json).unwrap() + "\n"))?;
    print!("{table}");
    eprintln!("{}", ledger_summary(&ctx.gateway.ledger_snapshot()));

    let report = &evaluation.report;
    let rate = report.n_failed as f64 / report.n_evaluated as f64;
    if rate > settings.max_failure_rate {
        return Err(CliError::FailureRate {
            failed: report.n_failed,
            total: report.n_evaluated,
            threshold: settings.max_failure_rate,
        });
    }
    Ok(())
}

fn cache(action: CacheAction) -> Result<(), CliError> {
    let (config, clear_search) = match &action {
        CacheAction::Inspect { config } => (config, false),
        CacheAction::Clear { config, search } => (config, *search),
    };
    let settings = Settings::load(&config.config)?;
    let cache = stage_cache(&settings).ok_or_else(|| ConfigError::Missing {
        key: "pipeline.cache_dir".into(),
        hint: "the stage cache is disabled without it".into(),
    })?;
    match action {
        CacheAction::Inspect { .. } => {
            println!("stage cache {}", cache.dir().display());
            for (stage, n) in cache.stats() {
                println!("  {:<22} {n}", stage.as_str());
            }
            println!("  {:<22} {}", "datastore", cache.datastore_count());
            if let Some(dir) = &settings.search.cache_dir {
                let n = std::fs::read_dir(dir).map(|rd| rd.count()).unwrap_or(0);
                println!("search cache {} ({n} queries)", dir.display());
            }
        }
        CacheAction::Clear { .. } => {
            cache.clear().map_err(output_err(cache.dir()))?;
            println!("cleared {}", cache.dir().display());
            if clear_search {
                if let Some(dir) = settings.search.cache_dir.as_ref().filter(|d| d.exists()) {
                    std::fs::remove_dir_all(dir).map_err(output_err(dir))?;
                    println!("cleared {}", dir.display());
                }
            }
        }
    }
    Ok(())
}

fn fixtures(config: &Path, articles: &Path, train: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let settings = Settings::load(config)?;
    let articles = load_articles(articles)?;
    std::fs::create_dir_all(out_dir).map_err(output_err(out_dir))?;
    let chat = Arc::new(RecordingBackend::new(settings.chat_backend()?));
    let search = Arc::new(RecordingSearchClient::new(settings.search_client()?));
    let gateway = settings.gateway_with(chat.clone() as Arc<dyn ChatBackend>);
    let provider = settings.embedder()?;
    let store = match train {
        Some(train) => {
            let training = load_articles(train)?;
            let build = crate::inside::build_datastore(
                &training,
                &settings.pipeline.detection,
                provider.as_ref(),
                &gateway,
                settings.workers,
            )?;
            let path = out_dir.join("datastore.jsonl");
            build.store.save(&path)?;
            build.store
        }
        None => load_store(&settings, &provider.fingerprint())?,
    };
    let mut ctx = context(&settings, gateway, search.clone() as Arc<dyn SearchClient>, store)?;
    // Recording needs every call to reach the backends.
    ctx.cache = None;
    let traces = ctx.run_batch(&articles, settings.workers, &|_| {});
    let chat_path = out_dir.join("chat.jsonl");
    let search_path = out_dir.join("search.jsonl");
    let n_chat = chat.write_fixtures(&chat_path).map_err(output_err(&chat_path))?;
    let n_search = search.write_fixtures(&search_path).map_err(output_err(&search_path))?;
    let failed = traces.iter().filter(|t| t.verdict.is_none()).count();
    println!(
        "recorded {n_chat} model and {n_search} search responses over {} articles ({failed} without verdict)",
        traces.len()
    );
    Ok(())
}

fn clip(s: &str, max: usize) -> String {
    let one_line = s.split_whitespace().collect::<Vec<_>>().join(" ");
    match one_line.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &one_line[..i]),
        None => one_line,
    }
}

/// Human-readable walk through every stage of one article's run. The last
/// line is always `verdict: <label> (<how decided>)` or `verdict: none`.
pub fn render_case(article: &NewsArticle, trace: &PipelineTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[target news]");
    let _ = writeln!(out, "  id      {}", article.id);
    let _ = writeln!(out, "  title   {}", clip(&article.title, 120));
    let _ = writeln!(out, "  text    {}", clip(&article.body, 240));
    if !article.tweets.is_empty() {
        let _ = writeln!(out, "  tweets  {} ({})", article.tweets.len(), clip(&article.joined_tweets(), 120));
    }
    if let Some(gold) = article.gold_label {
        let _ = writeln!(out, "  label   {gold}");
    }

    let _ = writeln!(out, "\n[detection]");
    match &trace.keyword_set {
        Some(k) => {
            let _ = writeln!(out, "  keywords  {}", k.keywords.join(", "));
        }
        None => {
            let _ = writeln!(out, "  (no keywords)");
        }
    }

    let _ = writeln!(out, "\n[inside investigation]");
    match &trace.demonstrations {
        Some(d) if !d.is_empty() => {
            for demo in d.interleaved() {
                let _ = writeln!(
                    out,
                    "  {:<4}  {:.4}  {}  {}",
                    demo.label.as_str(),
                    demo.distance,
                    demo.article.id,
                    clip(&demo.article.title, 80)
                );
            }
        }
        _ => {
            let _ = writeln!(out, "  (no demonstrations)");
        }
    }

    let _ = writeln!(out, "\n[outside investigation]");
    match &trace.evidence {
        Some(e) => {
            let _ = writeln!(out, "  query    {}", e.query_used);
            if e.is_empty() {
                let _ = writeln!(out, "  (no evidence)");
            } else {
                let _ = writeln!(
                    out,
                    "  source   {} <{}>",
                    e.source_title.as_deref().unwrap_or(""),
                    e.source_url.as_deref().unwrap_or("")
                );
                let _ = writeln!(out, "  snippet  {}", clip(&e.snippet, 240));
            }
        }
        None => {
            let _ = writeln!(out, "  (not run)");
        }
    }

    for (name, judgement) in [
        ("inside judge", &trace.inside_judgement),
        ("outside judge", &trace.outside_judgement),
    ] {
        let _ = writeln!(out, "\n[{name}]");
        match judgement {
            Some(j) => {
                let _ = writeln!(out, "  [This is {} news] {}", j.verdict, clip(&j.explanation, 240));
            }
            None => {
                let _ = writeln!(out, "  (no judgement)");
            }
        }
    }

    let _ = writeln!(out, "\n[determination]");
    match &trace.verdict {
        Some(v) => {
            let _ = writeln!(out, "  decided by {}", v.decided_by);
            if let Some(raw) = &v.raw_model_output {
                let _ = writeln!(out, "  selector   {}", clip(raw, 240));
            }
        }
        None => {
            let _ = writeln!(out, "  (no verdict)");
        }
    }

    if !trace.stage_errors.is_empty() {
        let _ = writeln!(out, "\n[stage errors]");
        for e in &trace.stage_errors {
            let _ = writeln!(out, "  {}: {}", e.stage, e.message);
        }
    }
    let _ = writeln!(out);
    match &trace.verdict {
        Some(v) => {
            let _ = writeln!(out, "verdict: {} ({})", v.final_label, v.decided_by);
        }
        None => {
            let _ = writeln!(out, "verdict: none");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DecidedBy, Label, Verdict};

    #[test]
    fn clip_collapses_whitespace_and_marks_cuts() {
        assert_eq!(clip("a\n b", 10), "a b");
        assert_eq!(clip("abcdef", 3), "abc...");
        assert_eq!(clip("ééé", 2), "éé...");
    }

    #[test]
    fn case_ends_with_verdict_line() {
        let article = NewsArticle::new("a1", "Title", "Body").with_label(Label::Fake);
        let mut trace = PipelineTrace::new(&article);
        assert!(render_case(&article, &trace).ends_with("verdict: none\n"));
        trace.verdict = Some(Verdict {
            final_label: Label::Fake,
            decided_by: DecidedBy::Agreement,
            raw_model_output: None,
        });
        let text = render_case(&article, &trace);
        assert!(text.ends_with("\nverdict: fake (agreement)\n"), "{text}");
        assert!(text.contains("(no demonstrations)"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Backend("x".into()).exit_code(), 1);
        assert_eq!(CliError::DatasetOther("x".into()).exit_code(), 2);
        let e = CliError::FailureRate {
            failed: 1,
            total: 2,
            threshold: 0.1,
        };
        assert_eq!(e.exit_code(), 3);
        assert_eq!(run_from(["newsverdict", "--bogus"]), 1);
        assert_eq!(run_from(["newsverdict", "--help"]), 0);
    }
}
