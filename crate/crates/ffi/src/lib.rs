//! C ABI over the `resflow` engine.
//!
//! Models and runs are opaque handles. Every fallible call returns a
//! [`ResflowStatus`]; on failure the message is available from
//! [`resflow_last_error`] on the same thread until the next failing call.
//!
//! Numeric buffers are caller-allocated: pass a pointer and its capacity in
//! elements, and the call reports how many it wrote (or needs). JSON
//! documents are returned as NUL-terminated strings owned by the caller and
//! released with [`resflow_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use resflow::attribution::{attention_step, contribution_map, top_neurons};
use resflow::lens::Component;
use resflow::payload::{to_json_bytes, Analysis, Targets};
use resflow::registry::{load_named_model, LoadedModel};
use resflow::transformer::{run, run_text, Point, RunCapture};
use resflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResflowStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Layer, head, position, threshold, target or point out of range or malformed.
    InvalidArgument = 3,
    /// The model could not be located or its files are unreadable or inconsistent.
    ModelLoad = 4,
    /// Empty input, an unknown token id, or a sequence longer than the context.
    InvalidInput = 5,
    /// The output buffer is smaller than the result; the needed length was reported.
    BufferTooSmall = 6,
    /// Internal failure, including a caught panic.
    Internal = 7,
}

/// Loaded model parameters and vocabulary.
pub struct ResflowModel {
    model: Arc<LoadedModel>,
}

/// Capture of one forward pass. Keeps its model alive.
pub struct ResflowRun {
    model: Arc<LoadedModel>,
    capture: RunCapture,
}

/// Shape of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ResflowModelInfo {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_vocab: usize,
    pub n_ctx: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn status_of(err: &Error) -> ResflowStatus {
    match err {
        Error::Index(_) | Error::InvalidThreshold(_) | Error::EmptyTargets => ResflowStatus::InvalidArgument,
        Error::EmptyInput | Error::UnknownTokenId(_) | Error::ContextOverflow { .. } => ResflowStatus::InvalidInput,
        Error::Io { .. }
        | Error::ArchiveFormat(_)
        | Error::UnsupportedDtype(_)
        | Error::MissingParameter(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidConfig(_)
        | Error::Vocab(_)
        | Error::Config(_)
        | Error::ModelNotFound(_) => ResflowStatus::ModelLoad,
        Error::Decomposition(_) => ResflowStatus::Internal,
    }
}

struct Failure(ResflowStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(status_of(&err), err.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> ResflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ResflowStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("internal panic: {message}"));
            ResflowStatus::Internal
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(ResflowStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> std::result::Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ResflowStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

fn invalid(message: String) -> Failure {
    Failure(ResflowStatus::InvalidArgument, message)
}

/// Copies `values` into a caller buffer of `capacity` elements and reports
/// the full length through `out_len`.
unsafe fn fill<T: Copy>(values: &[T], out: *mut T, capacity: usize, out_len: *mut usize) -> Outcome {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = values.len();
    if values.len() > capacity {
        return Err(Failure(
            ResflowStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {} needed", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

unsafe fn emit_json(bytes: Vec<u8>, out: *mut *mut c_char) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    let s = CString::new(bytes).map_err(|_| Failure(ResflowStatus::Internal, "JSON contains NUL".into()))?;
    *out = s.into_raw();
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn resflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn resflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model from a directory or hub-cache reference.
///
/// # Safety
/// `reference` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn resflow_model_open(reference: *const c_char, out: *mut *mut ResflowModel) -> ResflowStatus {
    guard(|| {
        let reference = string(reference, "reference")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_named_model(reference, reference, None)?;
        *out = Box::into_raw(Box::new(ResflowModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Releases a model handle. Runs created from it stay valid.
///
/// # Safety
/// `model` must come from [`resflow_model_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn resflow_model_free(model: *mut ResflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn resflow_model_info(model: *const ResflowModel, out: *mut ResflowModelInfo) -> ResflowStatus {
    guard(|| {
        let c = &borrow(model, "model")?.model.params.config;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ResflowModelInfo {
            n_layer: c.n_layer,
            n_head: c.n_head,
            d_model: c.d_model,
            d_ff: c.d_ff,
            n_vocab: c.n_vocab,
            n_ctx: c.n_ctx,
        };
        Ok(())
    })
}

/// Forward passes run against this model so far; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn resflow_model_forward_passes(model: *const ResflowModel) -> u64 {
    model.as_ref().map_or(0, |m| m.model.params.forward_pass_count())
}

unsafe fn new_run(
    model: *const ResflowModel,
    out: *mut *mut ResflowRun,
    f: impl FnOnce(&LoadedModel) -> resflow::Result<RunCapture>,
) -> Outcome {
    let model = borrow(model, "model")?;
    if out.is_null() {
        return Err(null("out"));
    }
    let capture = f(&model.model)?;
    *out = Box::into_raw(Box::new(ResflowRun {
        model: model.model.clone(),
        capture,
    }));
    Ok(())
}

/// Tokenizes `text` and runs one instrumented forward pass.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn resflow_run_text(
    model: *const ResflowModel,
    text: *const c_char,
    out: *mut *mut ResflowRun,
) -> ResflowStatus {
    guard(|| {
        let text = string(text, "text")?;
        new_run(model, out, |m| run_text(&m.params, &m.vocab, text))
    })
}

/// Runs one instrumented forward pass over explicit token ids.
///
/// # Safety
/// `model` must be a live handle, `tokens` must point to `len` ids, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn resflow_run_tokens(
    model: *const ResflowModel,
    tokens: *const u32,
    len: usize,
    out: *mut *mut ResflowRun,
) -> ResflowStatus {
    guard(|| {
        let tokens = if len == 0 {
            &[][..]
        } else if tokens.is_null() {
            return Err(null("tokens"));
        } else {
            std::slice::from_raw_parts(tokens, len)
        };
        new_run(model, out, |m| run(&m.params, tokens))
    })
}

/// # Safety
/// `run` must come from a `resflow_run_*` call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn resflow_run_free(run: *mut ResflowRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of tokens in the run; 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn resflow_run_seq_len(run: *const ResflowRun) -> usize {
    run.as_ref().map_or(0, |r| r.capture.seq_len())
}

/// Token ids of the run.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `capacity` ids.
#[no_mangle]
pub unsafe extern "C" fn resflow_run_token_ids(
    run: *const ResflowRun,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> ResflowStatus {
    guard(|| fill(borrow(run, "run")?.capture.tokens(), out, capacity, out_len))
}

/// Importance of every head of `layer` for the update at `position`
/// (`n_head` values).
///
/// # Safety
/// `run` must be a live handle; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn resflow_head_importances(
    run: *const ResflowRun,
    layer: usize,
    position: usize,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let step = attention_step(&r.capture, &r.model.params, layer, position)?;
        let values: Vec<f64> = (0..r.capture.n_head()).map(|h| step.head_importance(h)).collect();
        fill(&values, out, capacity, out_len)
    })
}

/// Row-major `[T, T]` attention pattern of one head.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn resflow_attention_map(
    run: *const ResflowRun,
    layer: usize,
    head: usize,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let (n_layer, n_head) = (r.capture.n_layer(), r.capture.n_head());
        if layer >= n_layer || head >= n_head {
            return Err(invalid(format!("head ({layer}, {head}) outside {n_layer} × {n_head}")));
        }
        let values: Vec<f64> = r.capture.attention(layer, head).iter().map(|&x| x as f64).collect();
        fill(&values, out, capacity, out_len)
    })
}

/// Row-major `[T, T]` contribution map of one head: row `i` holds the
/// per-source scores of the update at position `i`.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn resflow_contribution_map(
    run: *const ResflowRun,
    layer: usize,
    head: usize,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let map = contribution_map(&r.capture, &r.model.params, layer, head)?;
        fill(&map.iter().copied().collect::<Vec<_>>(), out, capacity, out_len)
    })
}

/// The `k` highest-scoring FFN neurons at `(layer, position)`, best first.
/// `neurons` and `scores` must each hold `capacity` elements.
///
/// # Safety
/// `run` must be a live handle; both buffers must hold `capacity` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn resflow_top_neurons(
    run: *const ResflowRun,
    layer: usize,
    position: usize,
    k: usize,
    neurons: *mut u32,
    scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let top = top_neurons(&r.capture, &r.model.params, layer, position, k)?;
        let ids: Vec<u32> = top.iter().map(|&(n, _)| n as u32).collect();
        let values: Vec<f64> = top.iter().map(|&(_, s)| s).collect();
        fill(&ids, neurons, capacity, out_len)?;
        fill(&values, scores, capacity, out_len)
    })
}

fn analysis(r: &ResflowRun) -> Analysis<'_> {
    Analysis::new(&r.model.params, Some(&r.model.vocab), &r.capture)
}

/// Information-flow graph document. `targets` is `last`, `all` or a comma
/// separated position list.
///
/// # Safety
/// `run` must be a live handle, `targets` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn resflow_graph_json(
    run: *const ResflowRun,
    threshold: f64,
    targets: *const c_char,
    out: *mut *mut c_char,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let targets: Targets = string(targets, "targets")?.parse()?;
        emit_json(to_json_bytes(&analysis(r).graph(threshold, &targets)?), out)
    })
}

/// Logit-lens document for the residual state at `point` (`embed`, `mid` or
/// `post`) of `layer`.
///
/// # Safety
/// `run` must be a live handle, `point` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn resflow_lens_json(
    run: *const ResflowRun,
    layer: usize,
    point: *const c_char,
    position: usize,
    k: usize,
    apply_ln: bool,
    out: *mut *mut c_char,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let point: Point = string(point, "point")?.parse()?;
        emit_json(
            to_json_bytes(&analysis(r).lens(layer, point, position, k, apply_ln)?),
            out,
        )
    })
}

/// Vocabulary projection of one component's update, e.g. `head:1:3:7`.
///
/// # Safety
/// `run` must be a live handle, `component` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn resflow_projection_json(
    run: *const ResflowRun,
    component: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> ResflowStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let component: Component = string(component, "component")?.parse()?;
        emit_json(to_json_bytes(&analysis(r).projection(component, k)?), out)
    })
}

/// Releases a string returned by a `resflow_*_json` call.
///
/// # Safety
/// `s` must be null or come from this library, and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn resflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
