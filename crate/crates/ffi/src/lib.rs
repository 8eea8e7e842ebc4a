//! C ABI over the rolefact engine.
//!
//! Handles are opaque and owned by the caller: every `*_new`/`*_load` pairs
//! with a `*_free`. Functions return an [`RfStatus`]; on failure the message
//! is available from [`rf_last_error`] on the same thread. Strings handed out
//! by the library are NUL-terminated UTF-8 and must be released with
//! [`rf_string_free`].
//!
//! A knowledge base and an engine may be shared across threads for
//! [`rf_respond`] and [`rf_retrieve`]. The `rf_engine_set_*` calls need
//! exclusive access.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use rolefact::baselines::respond;
use rolefact::llm::{LlmClient, RemoteBackend, RemoteConfig, ScriptedMock};
use rolefact::pipeline::{confidence_gate, Method, PipelineConfig, PipelineError, Threshold};
use rolefact::retrieval::{Bm25Index, IndexOptions, Retriever};
use rolefact::task::InterviewTask;
use rolefact::{load_corpus, KnowledgeBase};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Corpus = 5,
    Backend = 6,
    Pipeline = 7,
    Panic = 99,
}

/// A loaded corpus and its BM25 index.
pub struct RfKnowledgeBase {
    kb: KnowledgeBase,
    index: Bm25Index,
}

/// A chat backend plus the pipeline settings used by [`rf_respond`].
pub struct RfEngine {
    client: Arc<LlmClient>,
    config: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RfStatus, String);

impl Failure {
    fn new(status: RfStatus, message: impl ToString) -> Self {
        Failure(status, message.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Stage { .. } => RfStatus::Backend,
            PipelineError::Kb(_) => RfStatus::NotFound,
            PipelineError::Config(_) => RfStatus::InvalidArgument,
            PipelineError::Retrieval(_) => RfStatus::NotFound,
        };
        Failure::new(status, e)
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            RfStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {message}"));
            RfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(RfStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(RfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(RfStatus::NullArgument, format!("{name} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(RfStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, name: &str) -> Result<&'a mut *mut T, Failure> {
    let out = p
        .as_mut()
        .ok_or_else(|| Failure::new(RfStatus::NullArgument, format!("{name} is null")))?;
    *out = ptr::null_mut();
    Ok(out)
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(RfStatus::Pipeline, "output contains a NUL byte"))
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSONL corpus (file or directory) and builds its index.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_load(path: *const c_char, out: *mut *mut RfKnowledgeBase) -> RfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let kb = load_corpus(Path::new(path)).map_err(|e| Failure::new(RfStatus::Corpus, e))?;
        let index = Bm25Index::from_knowledge_base(&kb, IndexOptions::default())
            .map_err(|e| Failure::new(RfStatus::Corpus, e))?;
        *out = Box::into_raw(Box::new(RfKnowledgeBase { kb, index }));
        Ok(())
    })
}

/// # Safety
/// `kb` must be null or a handle from [`rf_kb_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_free(kb: *mut RfKnowledgeBase) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

fn engine(backend: Arc<dyn rolefact::ChatBackend>, cache_dir: Option<&str>) -> Result<RfEngine, Failure> {
    let client = match cache_dir {
        Some(dir) => LlmClient::with_disk_cache(backend, dir).map_err(|e| Failure::new(RfStatus::Backend, e))?,
        None => LlmClient::new(backend),
    };
    Ok(RfEngine {
        client: Arc::new(client),
        config: PipelineConfig::default(),
    })
}

/// Engine over a scripted fixture file. `cache_dir` may be null.
///
/// # Safety
/// `fixtures` must be a valid C string, `cache_dir` null or a valid C
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_new_mock(
    fixtures: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut RfEngine,
) -> RfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fixtures = str_arg(fixtures, "fixtures")?;
        let cache = if cache_dir.is_null() { None } else { Some(str_arg(cache_dir, "cache_dir")?) };
        let mock = ScriptedMock::load(fixtures).map_err(|e| Failure::new(RfStatus::Backend, e))?;
        *out = Box::into_raw(Box::new(engine(Arc::new(mock), cache)?));
        Ok(())
    })
}

/// Engine over the OpenAI-compatible endpoint named by `ROLEFACT_API_BASE`,
/// `ROLEFACT_MODEL` and `ROLEFACT_API_KEY`. `cache_dir` may be null.
///
/// # Safety
/// `cache_dir` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_new_from_env(cache_dir: *const c_char, out: *mut *mut RfEngine) -> RfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cache = if cache_dir.is_null() { None } else { Some(str_arg(cache_dir, "cache_dir")?) };
        let cfg = RemoteConfig::from_env().map_err(|e| Failure::new(RfStatus::InvalidArgument, e))?;
        let backend = RemoteBackend::new(cfg).map_err(|e| Failure::new(RfStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(engine(Arc::new(backend), cache)?));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from an `rf_engine_new_*` call, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_free(engine: *mut RfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Sets the self-check acceptance threshold to `num/den`.
///
/// # Safety
/// `engine` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_set_threshold(engine: *mut RfEngine, num: u64, den: u64) -> RfStatus {
    guard(|| {
        let engine = mut_arg(engine, "engine")?;
        engine.config.t = Threshold::new(num, den).map_err(|e| Failure::new(RfStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Sets the number of self-check samples; 0 disables self-checking.
///
/// # Safety
/// `engine` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_set_samples(engine: *mut RfEngine, m: u32) -> RfStatus {
    guard(|| {
        mut_arg(engine, "engine")?.config.m = m;
        Ok(())
    })
}

/// Sets how many scenes are retrieved per query.
///
/// # Safety
/// `engine` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn rf_engine_set_retrieval_depth(engine: *mut RfEngine, n: usize) -> RfStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure::new(RfStatus::InvalidArgument, "retrieval depth must be at least 1"));
        }
        mut_arg(engine, "engine")?.config.n = n;
        Ok(())
    })
}

/// Answers one interview task. `task_json` is a task object; `method` is one
/// of `baseline`, `kgr`, `sr`, `rolefact`, or null for `rolefact`. On
/// success `*out_trace` receives the response trace as JSON.
///
/// # Safety
/// Handles must be live; strings valid C strings; `out_trace` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_respond(
    engine: *const RfEngine,
    kb: *const RfKnowledgeBase,
    task_json: *const c_char,
    method: *const c_char,
    out_trace: *mut *mut c_char,
) -> RfStatus {
    guard(|| {
        let out = out_arg(out_trace, "out_trace")?;
        let engine = ref_arg(engine, "engine")?;
        let kb = ref_arg(kb, "kb")?;
        let task: InterviewTask = serde_json::from_str(str_arg(task_json, "task_json")?)
            .map_err(|e| Failure::new(RfStatus::InvalidArgument, format!("task: {e}")))?;
        let method: Method = if method.is_null() {
            Method::Rolefact
        } else {
            str_arg(method, "method")?
                .parse()
                .map_err(|e| Failure::new(RfStatus::InvalidArgument, e))?
        };
        let trace = respond(method, &engine.client, &kb.kb, &kb.index, &task, &engine.config)?;
        *out = into_c_string(trace.to_json())?;
        Ok(())
    })
}

/// Top-`n` scenes of `story_id` for `query` as a JSON array of
/// `{document, score}`. A negative `cutoff` means no cutoff.
///
/// # Safety
/// `kb` must be live; strings valid C strings; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_retrieve(
    kb: *const RfKnowledgeBase,
    story_id: *const c_char,
    query: *const c_char,
    n: usize,
    cutoff: i64,
    out_json: *mut *mut c_char,
) -> RfStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let kb = ref_arg(kb, "kb")?;
        let story = str_arg(story_id, "story_id")?;
        let query = str_arg(query, "query")?;
        let cutoff = u64::try_from(cutoff).ok();
        let result = kb
            .index
            .retrieve(story, query, n, cutoff)
            .map_err(|e| Failure::new(RfStatus::NotFound, e))?;
        let json = serde_json::to_string(&result.hits).map_err(|e| Failure::new(RfStatus::Pipeline, e))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Whether `k` supporting verdicts out of `m` samples pass the threshold
/// `num/den`. Never passes when `m` is 0.
///
/// # Safety
/// `out_pass` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_confidence_gate(k: u32, m: u32, num: u64, den: u64, out_pass: *mut bool) -> RfStatus {
    guard(|| {
        let out = out_pass
            .as_mut()
            .ok_or_else(|| Failure::new(RfStatus::NullArgument, "out_pass is null"))?;
        if k > m {
            return Err(Failure::new(RfStatus::InvalidArgument, "k exceeds m"));
        }
        let t = Threshold::new(num, den).map_err(|e| Failure::new(RfStatus::InvalidArgument, e))?;
        *out = confidence_gate(k, m, t);
        Ok(())
    })
}
