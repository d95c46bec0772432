//! C ABI over the featureloop memory store, tag parser, template checks and
//! RIG metrics.
//!
//! Every function returns an [`FlStatus`]. On failure a message is available
//! from [`fl_last_error_message`] on the same thread. Strings returned
//! through `char **out` parameters are owned by the caller and must be
//! released with [`fl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use featureloop::domain::{content_hash, validate_template, EvalStatus, ScoreDraft, TemplateError};
use featureloop::memory::{MemoryError, MemoryStore};
use featureloop::oracle::{self, OracleError};
use featureloop::sentinel::parse_tags;
use serde_json::Value;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    MissingPlaceholder = 4,
    DuplicatePlaceholder = 5,
    StorageUnavailable = 6,
    CorruptTail = 7,
    InvalidRecord = 8,
    DegenerateLabels = 9,
    Panic = 10,
}

/// Opaque handle to an open memory store.
pub struct FlMemory {
    store: MemoryStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FlStatus, String);

fn fail(status: FlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

impl From<MemoryError> for Failure {
    fn from(e: MemoryError) -> Self {
        let status = match e {
            MemoryError::StorageUnavailable(_) => FlStatus::StorageUnavailable,
            MemoryError::CorruptTail { .. } => FlStatus::CorruptTail,
            MemoryError::InvalidRecord(_) => FlStatus::InvalidRecord,
        };
        Failure(status, e.to_string())
    }
}

impl From<TemplateError> for Failure {
    fn from(e: TemplateError) -> Self {
        let status = match e {
            TemplateError::MissingPlaceholder => FlStatus::MissingPlaceholder,
            TemplateError::DuplicatePlaceholder(_) => FlStatus::DuplicatePlaceholder,
        };
        Failure(status, e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        let status = match e {
            OracleError::DegenerateLabels => FlStatus::DegenerateLabels,
            _ => FlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FlStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(FlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(FlStatus::NullPointer, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| fail(FlStatus::InvalidArgument, "string contains NUL"))?;
    if out.is_null() {
        return Err(fail(FlStatus::NullPointer, "output pointer is null"));
    }
    out.write(c.into_raw());
    Ok(())
}

unsafe fn memory<'a>(handle: *const FlMemory) -> Result<&'a MemoryStore, Failure> {
    handle
        .as_ref()
        .map(|h| &h.store)
        .ok_or_else(|| fail(FlStatus::NullPointer, "memory handle is null"))
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call on this thread; do not free.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Hex content hash of the whitespace-normalized text.
///
/// # Safety
/// `input` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_content_hash(input: *const c_char, out: *mut *mut c_char) -> FlStatus {
    guard(|| put_string(out, content_hash(text(input, "text")?)))
}

/// Checks the placeholder rule and writes the template id.
///
/// # Safety
/// `prompt` must be a NUL-terminated string; `out_id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_validate_template(prompt: *const c_char, out_id: *mut *mut c_char) -> FlStatus {
    guard(|| {
        let t = validate_template(text(prompt, "template")?)?;
        put_string(out_id, t.id)
    })
}

/// Parses raw model output into a JSON array of tags.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_parse_tags(raw: *const c_char, out_json: *mut *mut c_char) -> FlStatus {
    guard(|| {
        let tags = parse_tags(text(raw, "raw output")?);
        put_string(out_json, serde_json::to_string(tags.tags()).expect("strings serialize"))
    })
}

unsafe fn slices<'a>(preds: *const f64, labels: *const u8, n: usize) -> Result<(&'a [f64], &'a [u8]), Failure> {
    if n == 0 {
        return Err(fail(FlStatus::InvalidArgument, "empty input"));
    }
    if preds.is_null() || labels.is_null() {
        return Err(fail(FlStatus::NullPointer, "input array is null"));
    }
    let p = std::slice::from_raw_parts(preds, n);
    let l = std::slice::from_raw_parts(labels, n);
    if l.iter().any(|&y| y > 1) {
        return Err(fail(FlStatus::InvalidArgument, "labels must be 0 or 1"));
    }
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(fail(FlStatus::InvalidArgument, "predictions must be in [0, 1]"));
    }
    Ok((p, l))
}

/// Mean binary cross-entropy.
///
/// # Safety
/// `preds` and `labels` must point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_cross_entropy(preds: *const f64, labels: *const u8, n: usize, out: *mut f64) -> FlStatus {
    guard(|| {
        let (p, l) = slices(preds, labels, n)?;
        put(out, oracle::cross_entropy(p, l)?)
    })
}

/// Relative information gain against the constant mean-label predictor.
///
/// # Safety
/// `preds` and `labels` must point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_rig(preds: *const f64, labels: *const u8, n: usize, out: *mut f64) -> FlStatus {
    guard(|| {
        let (p, l) = slices(preds, labels, n)?;
        put(out, oracle::rig(p, l)?)
    })
}

/// Opens (creating if absent) the memory log at `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable. The
/// handle must be released with [`fl_memory_close`].
#[no_mangle]
pub unsafe extern "C" fn fl_memory_open(path: *const c_char, out: *mut *mut FlMemory) -> FlStatus {
    guard(|| {
        let store = MemoryStore::open(text(path, "path")?)?;
        put(out, Box::into_raw(Box::new(FlMemory { store })))
    })
}

/// Closes a handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from [`fl_memory_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_close(handle: *mut FlMemory) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

fn draft_from_json(json: &str) -> Result<ScoreDraft, Failure> {
    let bad = |m: &str| fail(FlStatus::InvalidRecord, m);
    let v: Value = serde_json::from_str(json).map_err(|e| bad(&e.to_string()))?;
    let s = |k: &str| v.get(k).and_then(Value::as_str).ok_or_else(|| bad(&format!("missing string {k}")));
    let f = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(&format!("missing number {k}")));
    let u = |k: &str| v.get(k).and_then(Value::as_u64).ok_or_else(|| bad(&format!("missing integer {k}")));
    let template = validate_template(s("prompt_text")?)?;
    let agent = s("agent_id")?;
    let status = match v.get("status").and_then(Value::as_str).unwrap_or("ok") {
        "ok" => EvalStatus::Ok,
        "extraction_failed" => EvalStatus::ExtractionFailed,
        "eval_failed" => EvalStatus::EvalFailed,
        other => return Err(bad(&format!("unknown status {other}"))),
    };
    Ok(match status {
        EvalStatus::Ok => ScoreDraft::ok(
            &template,
            agent,
            f("baseline_rig")?,
            f("extended_rig")?,
            u("eval_size")?,
            u32::try_from(u("repeats")?).map_err(|_| bad("repeats out of range"))?,
        ),
        failed => ScoreDraft::failed(&template, agent, failed),
    })
}

/// Appends a record given as JSON: `prompt_text`, `agent_id`, `status`
/// (default "ok") and, for ok records, `baseline_rig`, `extended_rig`,
/// `eval_size`, `repeats`. The relative score is derived. Writes the
/// assigned seq.
///
/// # Safety
/// `handle` must be open; `draft_json` NUL-terminated; `out_seq` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_append_json(
    handle: *const FlMemory,
    draft_json: *const c_char,
    out_seq: *mut u64,
) -> FlStatus {
    guard(|| {
        let store = memory(handle)?;
        let draft = draft_from_json(text(draft_json, "draft")?)?;
        put(out_seq, store.append(draft)?)
    })
}

/// Number of valid records.
///
/// # Safety
/// `handle` must be open; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_len(handle: *const FlMemory, out: *mut u64) -> FlStatus {
    guard(|| put(out, memory(handle)?.len()?))
}

/// Whether any record carries `prompt_id`.
///
/// # Safety
/// `handle` must be open; `prompt_id` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_contains(handle: *const FlMemory, prompt_id: *const c_char, out: *mut bool) -> FlStatus {
    guard(|| put(out, memory(handle)?.contains(text(prompt_id, "prompt_id")?)?))
}

/// Best `k` ok records as a JSON array.
///
/// # Safety
/// `handle` must be open; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_top_k_json(handle: *const FlMemory, k: usize, out_json: *mut *mut c_char) -> FlStatus {
    guard(|| {
        let records = memory(handle)?.top_k(k)?;
        put_string(out_json, serde_json::to_string(&records).expect("records serialize"))
    })
}

/// Worst `k` ok records as a JSON array.
///
/// # Safety
/// `handle` must be open; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_bottom_k_json(handle: *const FlMemory, k: usize, out_json: *mut *mut c_char) -> FlStatus {
    guard(|| {
        let records = memory(handle)?.bottom_k(k)?;
        put_string(out_json, serde_json::to_string(&records).expect("records serialize"))
    })
}

/// Records with seq greater than `since` as a JSON array; a negative
/// `since` returns every record.
///
/// # Safety
/// `handle` must be open; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_read_since_json(
    handle: *const FlMemory,
    since: i64,
    out_json: *mut *mut c_char,
) -> FlStatus {
    guard(|| {
        let after = u64::try_from(since).ok();
        let records = memory(handle)?.read_since(after)?;
        put_string(out_json, serde_json::to_string(&records).expect("records serialize"))
    })
}

/// Truncates a torn tail; writes the number of bytes dropped.
///
/// # Safety
/// `handle` must be open; `out_truncated` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_memory_recover(handle: *const FlMemory, out_truncated: *mut u64) -> FlStatus {
    guard(|| {
        let r = memory(handle)?.recover()?;
        put(out_truncated, r.truncated_bytes)
    })
}
