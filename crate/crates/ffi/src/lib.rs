//! C ABI over the newsverdict pipeline.
//!
//! Conventions:
//! - Every fallible function returns an [`NvStatus`]; on failure a message is
//!   available from [`nv_last_error_message`] on the same thread.
//! - Strings crossing the boundary are NUL-terminated UTF-8. Strings returned
//!   through `char **` out-parameters are owned by the caller and must be
//!   released with [`nv_string_free`].
//! - Handles are opaque and released with their matching `_free` function.
//!   A pipeline handle may be used from several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use newsverdict::config::{ConfigError, Settings};
use newsverdict::inside::{knn_retrieve, Datastore, EmbeddingVector};
use newsverdict::llm::StageTag;
use newsverdict::{article_digest, compute_metrics, parse_verdict, Label, NewsArticle, PipelineContext};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Dataset = 5,
    Unparseable = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvLabel {
    Real = 0,
    Fake = 1,
}

impl From<Label> for NvLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Real => NvLabel::Real,
            Label::Fake => NvLabel::Fake,
        }
    }
}

/// Fake-as-positive scores for a list of predictions.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NvMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub n_evaluated: u64,
}

/// Model requests made through a pipeline handle, per stage.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NvCallCounts {
    pub detection: u64,
    pub inside_judge: u64,
    pub outside_judge: u64,
    pub determination: u64,
    pub retries: u64,
}

/// Loaded configuration, datastore and backends.
pub struct NvPipeline {
    context: PipelineContext,
}

/// A datastore opened for direct nearest-neighbor queries.
pub struct NvDatastore {
    store: Datastore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NvStatus, String);

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NvStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {message}"));
            NvStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(NvStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(NvStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(NvStatus::NullArgument, format!("{name} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\u{fffd}")).expect("NUL bytes removed").into_raw()
}

fn config_failure(e: ConfigError) -> Failure {
    Failure(NvStatus::Config, e.to_string())
}

fn parse_article(json: &str) -> Result<NewsArticle, Failure> {
    let article: NewsArticle = serde_json::from_str(json)
        .map_err(|e| Failure(NvStatus::Dataset, format!("invalid article record: {e}")))?;
    if !article.is_valid() {
        return Err(Failure(NvStatus::Dataset, "article has an empty title and text".into()));
    }
    Ok(article)
}

fn label_from_u8(v: u8, index: usize) -> Result<Label, Failure> {
    match v {
        0 => Ok(Label::Real),
        1 => Ok(Label::Fake),
        _ => Err(Failure(
            NvStatus::InvalidArgument,
            format!("label {v} at index {index} is neither 0 (real) nor 1 (fake)"),
        )),
    }
}

/// Library version, a static string that must not be freed.
#[no_mangle]
pub extern "C" fn nv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn nv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn nv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens a pipeline from a configuration file. Environment overrides apply
/// as for the command-line tool. `inside.store_path` must name a datastore.
///
/// # Safety
/// `config_path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_pipeline_open(config_path: *const c_char, out: *mut *mut NvPipeline) -> NvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(config_path, "config_path")?;
        let settings = Settings::load(path).map_err(config_failure)?;
        let provider = settings.embedder().map_err(config_failure)?;
        let store_path = settings.store_path.clone().ok_or_else(|| {
            Failure(NvStatus::Config, "inside.store_path is required to open a pipeline".into())
        })?;
        let store = Datastore::load(&store_path, Some(&provider.fingerprint()))
            .map_err(|e| Failure(NvStatus::Dataset, e.to_string()))?;
        let gateway = settings.gateway().map_err(config_failure)?;
        let search = settings.search_client().map_err(config_failure)?;
        let context = PipelineContext {
            config: settings.pipeline.clone(),
            gateway: Arc::new(gateway),
            store: Arc::new(store),
            provider,
            search: Arc::new(settings.cached_search_with(search)),
            cache: settings.cache_dir.as_ref().map(newsverdict::pipeline::StageCache::new),
        };
        *out = Box::into_raw(Box::new(NvPipeline { context }));
        Ok(())
    })
}

/// Releases a pipeline. Null is ignored.
///
/// # Safety
/// `pipeline` must be null or a handle from [`nv_pipeline_open`] that has
/// not been freed and is not in use on another thread.
#[no_mangle]
pub unsafe extern "C" fn nv_pipeline_free(pipeline: *mut NvPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs one article (a JSON record with `id`, `title`, `text`, `tweets` and
/// optional `label`) and returns its full trace as JSON. A run that ends
/// without a verdict still returns `NV_STATUS_OK`; inspect the trace's
/// `verdict` and `stage_errors`.
///
/// # Safety
/// `pipeline` must be a live handle, `article_json` a valid C string and
/// `trace_json_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_pipeline_run(
    pipeline: *const NvPipeline,
    article_json: *const c_char,
    trace_json_out: *mut *mut c_char,
) -> NvStatus {
    guard(|| {
        let out = out_arg(trace_json_out, "trace_json_out")?;
        *out = std::ptr::null_mut();
        let pipeline = pipeline
            .as_ref()
            .ok_or_else(|| Failure(NvStatus::NullArgument, "pipeline is null".into()))?;
        let article = parse_article(str_arg(article_json, "article_json")?)?;
        let trace = pipeline.context.run_article(&article);
        *out = into_c_string(trace.to_json());
        Ok(())
    })
}

/// Model requests made so far through this pipeline.
///
/// # Safety
/// `pipeline` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_pipeline_call_counts(pipeline: *const NvPipeline, out: *mut NvCallCounts) -> NvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pipeline = pipeline
            .as_ref()
            .ok_or_else(|| Failure(NvStatus::NullArgument, "pipeline is null".into()))?;
        let ledger = pipeline.context.gateway.ledger_snapshot();
        *out = NvCallCounts {
            detection: ledger.stage(StageTag::Detection).requests,
            inside_judge: ledger.stage(StageTag::InsideJudge).requests,
            outside_judge: ledger.stage(StageTag::OutsideJudge).requests,
            determination: ledger.stage(StageTag::Determination).requests,
            retries: ledger.total_retries(),
        };
        Ok(())
    })
}

/// Content digest of an article record, as lowercase hex.
///
/// # Safety
/// `article_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_article_digest(article_json: *const c_char, out: *mut *mut c_char) -> NvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let article = parse_article(str_arg(article_json, "article_json")?)?;
        *out = into_c_string(article_digest(&article));
        Ok(())
    })
}

/// Extracts the verdict and explanation from a raw judge completion.
/// Returns `NV_STATUS_UNPARSEABLE` when no verdict marker is present.
///
/// # Safety
/// `raw` must be a valid C string; `label_out` and `explanation_out` valid
/// pointers.
#[no_mangle]
pub unsafe extern "C" fn nv_parse_verdict(
    raw: *const c_char,
    label_out: *mut NvLabel,
    explanation_out: *mut *mut c_char,
) -> NvStatus {
    guard(|| {
        let label_out = out_arg(label_out, "label_out")?;
        let explanation_out = out_arg(explanation_out, "explanation_out")?;
        *explanation_out = std::ptr::null_mut();
        let raw = str_arg(raw, "raw")?;
        let (label, explanation) =
            parse_verdict(raw).map_err(|e| Failure(NvStatus::Unparseable, e.to_string()))?;
        *label_out = label.into();
        *explanation_out = into_c_string(explanation);
        Ok(())
    })
}

/// Scores `len` predictions against gold labels, each encoded 0 = real,
/// 1 = fake. `len` must be positive.
///
/// # Safety
/// `predicted` and `gold` must point to `len` readable bytes each; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_compute_metrics(
    predicted: *const u8,
    gold: *const u8,
    len: usize,
    out: *mut NvMetrics,
) -> NvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if predicted.is_null() || gold.is_null() {
            return Err(Failure(NvStatus::NullArgument, "label arrays must not be null".into()));
        }
        let predicted = std::slice::from_raw_parts(predicted, len);
        let gold = std::slice::from_raw_parts(gold, len);
        let pairs = predicted
            .iter()
            .zip(gold)
            .enumerate()
            .map(|(i, (&p, &g))| Ok((label_from_u8(p, i)?, label_from_u8(g, i)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let m = compute_metrics(&pairs).map_err(|e| Failure(NvStatus::InvalidArgument, e.to_string()))?;
        *out = NvMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            tp: m.confusion.tp,
            fp: m.confusion.fp,
            fn_: m.confusion.fn_,
            tn: m.confusion.tn,
            n_evaluated: m.n_evaluated,
        };
        Ok(())
    })
}

/// Opens a datastore file. With a non-null `expected_fingerprint`, a store
/// built by a different encoder is rejected.
///
/// # Safety
/// `path` must be a valid C string, `expected_fingerprint` null or a valid C
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_datastore_open(
    path: *const c_char,
    expected_fingerprint: *const c_char,
    out: *mut *mut NvDatastore,
) -> NvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let fingerprint = if expected_fingerprint.is_null() {
            None
        } else {
            Some(str_arg(expected_fingerprint, "expected_fingerprint")?)
        };
        let store =
            Datastore::load(Path::new(path), fingerprint).map_err(|e| Failure(NvStatus::Dataset, e.to_string()))?;
        *out = Box::into_raw(Box::new(NvDatastore { store }));
        Ok(())
    })
}

/// Number of entries in the store, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nv_datastore_len(store: *const NvDatastore) -> usize {
    store.as_ref().map_or(0, |s| s.store.len())
}

/// Embedding dimension of the store, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nv_datastore_dim(store: *const NvDatastore) -> usize {
    store.as_ref().map_or(0, |s| s.store.dim())
}

/// Retrieves the `k` nearest fake and `k` nearest real entries to `query`
/// and returns them as JSON `{"positive": [...], "negative": [...]}`.
///
/// # Safety
/// `store` must be a live handle, `query` must point to `dim` readable
/// doubles and `json_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_datastore_query(
    store: *const NvDatastore,
    query: *const f64,
    dim: usize,
    k: usize,
    json_out: *mut *mut c_char,
) -> NvStatus {
    guard(|| {
        let out = out_arg(json_out, "json_out")?;
        *out = std::ptr::null_mut();
        let store = store
            .as_ref()
            .ok_or_else(|| Failure(NvStatus::NullArgument, "store is null".into()))?;
        if query.is_null() {
            return Err(Failure(NvStatus::NullArgument, "query is null".into()));
        }
        let values = std::slice::from_raw_parts(query, dim).to_vec();
        let vector = EmbeddingVector::new(values).map_err(|e| Failure(NvStatus::InvalidArgument, e.to_string()))?;
        let demos =
            knn_retrieve(&vector, &store.store, k).map_err(|e| Failure(NvStatus::InvalidArgument, e.to_string()))?;
        *out = into_c_string(serde_json::to_string(&demos).expect("demonstrations serialize"));
        Ok(())
    })
}

/// Releases a datastore. Null is ignored.
///
/// # Safety
/// `store` must be null or a handle from [`nv_datastore_open`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn nv_datastore_free(store: *mut NvDatastore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}
