//! C ABI over the core library: models live behind an opaque handle, every
//! call returns a status code, and the message for the most recent failure
//! is kept per thread.
//!
//! Conventions shared by the whole surface:
//!
//! * Out-parameters are written only on [`PopStatus::Ok`]; on any other
//!   status they are zeroed first, so a caller can never observe stale data.
//! * Returned buffers are `(pointer, length)` pairs with one extra
//!   NUL byte after `length` for C-string convenience. Generated text is
//!   raw model output and may contain interior NULs; treat the pair as
//!   authoritative and release it with [`pop_buffer_free`].
//! * Path and JSON arguments must be NUL-terminated UTF-8. Prompts are
//!   arbitrary NUL-free bytes.
//! * Handles are not synchronized; share a `PopModel` across threads only
//!   behind the caller's own lock. Distinct handles are independent.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pop_core::analysis::count_flops;
use pop_core::model::{
    generate, init_model, load_checkpoint, save_checkpoint, tokenizer, weights_hash, ModelConfig,
    ModelWeights,
};
use pop_core::pop::{pop_generate, PruningPlan};
use pop_core::PopError;

/// Result of every fallible call. `Ok` is zero; everything else is a
/// failure whose human-readable detail is available from
/// [`pop_last_error_message`] on the calling thread.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PopStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A path or JSON argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or argument value.
    Config = 3,
    /// An API contract was violated (e.g. a plan names a missing layer).
    Contract = 4,
    /// The request would exceed the model's maximum sequence length.
    Capacity = 5,
    /// Malformed input data.
    Data = 6,
    /// Malformed checkpoint, config, or plan artifact.
    Format = 7,
    /// Filesystem failure; the message names the path.
    Io = 8,
    /// An index (token id, layer, position) was out of bounds.
    Index = 9,
    /// Internal shape mismatch.
    Dimension = 10,
    /// A computation produced NaN or infinity.
    NonFinite = 11,
    /// A bug: the library panicked and the unwind was contained here.
    Panic = 12,
}

/// Opaque model handle. Create with [`pop_model_load`] or
/// [`pop_model_init`], release with [`pop_model_free`].
pub struct PopModel {
    weights: ModelWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    // Interior NULs would silently truncate the C view of the message.
    let clean: String = msg
        .chars()
        .map(|c| if c == '\0' { '?' } else { c })
        .collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(clean).expect("NULs were just stripped");
    });
}

fn status_of(e: &PopError) -> PopStatus {
    match e {
        PopError::Config(_) => PopStatus::Config,
        PopError::Contract(_) => PopStatus::Contract,
        PopError::Capacity(_) => PopStatus::Capacity,
        PopError::Data(_) => PopStatus::Data,
        PopError::Format(_) => PopStatus::Format,
        PopError::Io { .. } => PopStatus::Io,
        PopError::Index { .. } => PopStatus::Index,
        PopError::Dimension { .. } => PopStatus::Dimension,
        PopError::NonFinite { .. } => PopStatus::NonFinite,
    }
}

fn fail(e: PopError) -> PopStatus {
    set_last_error(&e.to_string());
    status_of(&e)
}

/// Runs a call body with the panic fence every `extern "C"` entry point
/// needs: an unwind crossing the ABI would abort the process. Also resets
/// the thread's error message, so it always describes the *latest* call.
fn guarded(f: impl FnOnce() -> PopStatus) -> PopStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "opaque panic payload".into());
            set_last_error(&format!("internal panic: {detail}"));
            PopStatus::Panic
        }
    }
}

/// NULL check plus byte view of a C string argument.
unsafe fn bytes_arg<'a>(p: *const c_char, name: &str) -> Result<&'a [u8], PopStatus> {
    if p.is_null() {
        set_last_error(&format!("{name} is NULL"));
        return Err(PopStatus::NullArgument);
    }
    Ok(CStr::from_ptr(p).to_bytes())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PopStatus> {
    let bytes = bytes_arg(p, name)?;
    std::str::from_utf8(bytes).map_err(|_| {
        set_last_error(&format!("{name} is not valid UTF-8"));
        PopStatus::InvalidUtf8
    })
}

unsafe fn model_arg<'a>(p: *const PopModel, name: &str) -> Result<&'a PopModel, PopStatus> {
    p.as_ref().ok_or_else(|| {
        set_last_error(&format!("{name} is NULL"));
        PopStatus::NullArgument
    })
}

/// Checks an out-pointer and clears it so failures never leave stale data.
unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, PopStatus>
where
    T: Zeroable,
{
    match p.as_mut() {
        Some(slot) => {
            *slot = T::zeroed();
            Ok(slot)
        }
        None => {
            set_last_error(&format!("{name} is NULL"));
            Err(PopStatus::NullArgument)
        }
    }
}

trait Zeroable {
    fn zeroed() -> Self;
}

impl<T> Zeroable for *mut T {
    fn zeroed() -> Self {
        ptr::null_mut()
    }
}

impl Zeroable for usize {
    fn zeroed() -> Self {
        0
    }
}

fn parse_config(json: &str) -> Result<ModelConfig, PopStatus> {
    let config: ModelConfig = serde_json::from_str(json)
        .map_err(|e| fail(PopError::Format(format!("model config: {e}"))))?;
    config.validate().map_err(fail)?;
    Ok(config)
}

fn parse_plan(json: &str) -> Result<PruningPlan, PopStatus> {
    serde_json::from_str(json).map_err(|e| fail(PopError::Format(format!("pruning plan: {e}"))))
}

/// Hands a byte vector to the caller: writes `(pointer, length)` and
/// appends the terminating NUL the header promises.
fn export_bytes(mut bytes: Vec<u8>, out: &mut *mut c_char, out_len: &mut usize) -> PopStatus {
    bytes.push(0);
    let boxed = bytes.into_boxed_slice();
    *out_len = boxed.len() - 1;
    *out = Box::into_raw(boxed) as *mut c_char;
    PopStatus::Ok
}

/// Loads a checkpoint from `path` into a fresh handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pop_model_load(
    path: *const c_char,
    out: *mut *mut PopModel,
) -> PopStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok(weights) => {
                *out = Box::into_raw(Box::new(PopModel { weights }));
                PopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Initializes a fresh randomly-seeded model from a JSON model config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pop_model_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut PopModel,
) -> PopStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let config = match str_arg(config_json, "config_json").and_then(|j| parse_config(j)) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match init_model(&config, seed) {
            Ok(weights) => {
                *out = Box::into_raw(Box::new(PopModel { weights }));
                PopStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the model to `path` in checkpoint format.
///
/// # Safety
/// `model` must come from this library and still be live; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pop_model_save(model: *const PopModel, path: *const c_char) -> PopStatus {
    guarded(|| {
        let model = match model_arg(model, "model") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match str_arg(path, "path") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match save_checkpoint(&model.weights, path) {
            Ok(()) => PopStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Releases a handle. NULL is a no-op. The handle must not be used again.
///
/// # Safety
/// `model` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pop_model_free(model: *mut PopModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the model's layer count, for building pruning plans client-side.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pop_model_num_layers(
    model: *const PopModel,
    out: *mut usize,
) -> PopStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let model = match model_arg(model, "model") {
            Ok(v) => v,
            Err(s) => return s,
        };
        *out = model.weights.config.num_layers;
        PopStatus::Ok
    })
}

/// Returns the SHA-256 of the model's weights as lowercase hex, allocated
/// with the shared buffer convention.
///
/// # Safety
/// `model` must be a live handle; `out_hash` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pop_model_hash(
    model: *const PopModel,
    out_hash: *mut *mut c_char,
    out_len: *mut usize,
) -> PopStatus {
    guarded(|| {
        let (out_hash, out_len) = match (out_arg(out_hash, "out_hash"), out_arg(out_len, "out_len"))
        {
            (Ok(h), Ok(l)) => (h, l),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let model = match model_arg(model, "model") {
            Ok(v) => v,
            Err(s) => return s,
        };
        export_bytes(weights_hash(&model.weights).into_bytes(), out_hash, out_len)
    })
}

fn run_generation(
    model: &PopModel,
    prompt: &[u8],
    plan: Option<&PruningPlan>,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u8>, PopStatus> {
    let ids = tokenizer::encode(prompt);
    let tokens = match plan {
        None => generate(&model.weights, &ids, max_new, temperature, seed),
        Some(plan) => {
            pop_generate(&model.weights, plan, &ids, max_new, temperature, seed).map(|(t, _)| t)
        }
    }
    .map_err(fail)?;
    tokenizer::decode(&tokens).map_err(fail)
}

/// Full-model generation. The output is the decoded continuation only —
/// the prompt is not echoed; `temperature` 0 is greedy.
///
/// # Safety
/// `model` must be a live handle; `prompt` must be NUL-terminated;
/// `out_text` and `out_len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pop_generate_text(
    model: *const PopModel,
    prompt: *const c_char,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out_text: *mut *mut c_char,
    out_len: *mut usize,
) -> PopStatus {
    guarded(|| {
        let (out_text, out_len) = match (out_arg(out_text, "out_text"), out_arg(out_len, "out_len"))
        {
            (Ok(t), Ok(l)) => (t, l),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let model = match model_arg(model, "model") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let prompt = match bytes_arg(prompt, "prompt") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run_generation(model, prompt, None, max_new, temperature, seed) {
            Ok(bytes) => export_bytes(bytes, out_text, out_len),
            Err(s) => s,
        }
    })
}

/// Generation with a pruned prefill: the plan's layers are skipped while
/// the prompt is processed and the full model handles every decoded token.
/// `plan_json` uses the same schema the CLI reads and writes, with 1-based
/// layer numbers.
///
/// # Safety
/// Same as [`pop_generate_text`], plus `plan_json` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pop_pruned_generate_text(
    model: *const PopModel,
    prompt: *const c_char,
    plan_json: *const c_char,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out_text: *mut *mut c_char,
    out_len: *mut usize,
) -> PopStatus {
    guarded(|| {
        let (out_text, out_len) = match (out_arg(out_text, "out_text"), out_arg(out_len, "out_len"))
        {
            (Ok(t), Ok(l)) => (t, l),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let model = match model_arg(model, "model") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let prompt = match bytes_arg(prompt, "prompt") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let plan = match str_arg(plan_json, "plan_json").and_then(|j| parse_plan(j)) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if let Err(e) = plan.validate(model.weights.config.num_layers) {
            return fail(e);
        }
        match run_generation(model, prompt, Some(&plan), max_new, temperature, seed) {
            Ok(bytes) => export_bytes(bytes, out_text, out_len),
            Err(s) => s,
        }
    })
}

/// Analytic prefill FLOP counts for a config under a plan, returned as a
/// JSON report. Needs no model weights.
///
/// # Safety
/// `config_json` and `plan_json` must be NUL-terminated strings;
/// `out_json` and `out_len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pop_flops_json(
    config_json: *const c_char,
    plan_json: *const c_char,
    seq_len: usize,
    out_json: *mut *mut c_char,
    out_len: *mut usize,
) -> PopStatus {
    guarded(|| {
        let (out_json, out_len) = match (out_arg(out_json, "out_json"), out_arg(out_len, "out_len"))
        {
            (Ok(j), Ok(l)) => (j, l),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let config = match str_arg(config_json, "config_json").and_then(|j| parse_config(j)) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let plan = match str_arg(plan_json, "plan_json").and_then(|j| parse_plan(j)) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if let Err(e) = plan.validate(config.num_layers) {
            return fail(e);
        }
        if seq_len == 0 {
            return fail(PopError::Config("seq_len must be at least 1".into()));
        }
        let report = count_flops(&config, &plan, seq_len);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        export_bytes(json.into_bytes(), out_json, out_len)
    })
}

/// The message for the most recent call on this thread: empty after a
/// success, a description after a failure. The pointer stays valid until
/// the next call from the same thread; do not free it.
#[no_mangle]
pub extern "C" fn pop_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a buffer returned by this library. `len` must be the length
/// the producing call reported. NULL is a no-op.
///
/// # Safety
/// `ptr`/`len` must be exactly as returned by one earlier call, unreleased.
#[no_mangle]
pub unsafe extern "C" fn pop_buffer_free(ptr: *mut c_char, len: usize) {
    if !ptr.is_null() {
        let slice = ptr::slice_from_raw_parts_mut(ptr as *mut u8, len + 1);
        drop(Box::from_raw(slice));
    }
}
