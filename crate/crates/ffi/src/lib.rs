//! C ABI for the tristream library.
//!
//! Conventions:
//! - Handles (`TsmDataset`, `TsmCheckpoint`) are opaque; create them through
//!   the constructor functions and release them with the matching `_free`.
//! - Every fallible call returns a [`TsmStatus`]; on failure the message is
//!   retrievable with [`tsm_last_error_message`] until the next call on the
//!   same thread.
//! - Configuration crosses the boundary as UTF-8 JSON matching the run
//!   configuration accepted by the `tristream` CLI; reports come back as
//!   JSON strings owned by the library (release with [`tsm_string_free`]).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use tristream::config::RunConfig;
use tristream::datagen::{self, Dataset};
use tristream::evaluator;
use tristream::trainer::{self, Checkpoint};
use tristream::Error;

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TsmStatus {
    Ok = 0,
    /// Unclassified failure.
    Unknown = 1,
    /// Invalid configuration or arguments.
    Config = 2,
    /// I/O or serialization failure.
    Io = 3,
    /// Non-finite numerics during training.
    Numeric = 4,
    /// Incompatible shapes or versions.
    Incompatible = 5,
    /// A required pointer argument was null.
    NullPointer = 6,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 7,
}

/// Opaque dataset handle.
pub struct TsmDataset {
    inner: Dataset,
}

/// Opaque trained-model handle.
pub struct TsmCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> TsmStatus {
    match err.exit_code() {
        2 => TsmStatus::Config,
        3 => TsmStatus::Io,
        4 => TsmStatus::Numeric,
        5 => TsmStatus::Incompatible,
        _ => TsmStatus::Unknown,
    }
}

fn fail(err: Error) -> TsmStatus {
    let s = status_of(&err);
    set_error(&err.to_string());
    s
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, TsmStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(TsmStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        TsmStatus::InvalidUtf8
    })
}

fn parse_config(text: &str) -> Result<RunConfig, TsmStatus> {
    let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        set_error(&format!("invalid config JSON: {e}"));
        TsmStatus::Config
    })?;
    if let Err(e) = cfg.apply_seed_env().and_then(|_| cfg.validate()) {
        return Err(fail(e));
    }
    Ok(cfg)
}

/// Last error message for the current thread; valid until the next
/// failing call on this thread. Never null.
#[no_mangle]
pub extern "C" fn tsm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate a synthetic dataset from a run-config JSON string.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsm_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut TsmDataset,
) -> TsmStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TsmStatus::NullPointer;
    }
    let text = match utf8_arg(config_json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let cfg = match parse_config(text) {
        Ok(c) => c,
        Err(s) => return s,
    };
    match datagen::generate(&cfg.dataset) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(TsmDataset { inner: ds }));
            TsmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a dataset previously written by `tsm_dataset_write` or the CLI.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsm_dataset_read(
    dir: *const c_char,
    out: *mut *mut TsmDataset,
) -> TsmStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TsmStatus::NullPointer;
    }
    let dir = match utf8_arg(dir) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match datagen::read_dataset(Path::new(dir)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(TsmDataset { inner: ds }));
            TsmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Write a dataset (manifest.json plus one binary blob per stream).
///
/// # Safety
/// `ds` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tsm_dataset_write(ds: *const TsmDataset, dir: *const c_char) -> TsmStatus {
    if ds.is_null() {
        set_error("null dataset handle");
        return TsmStatus::NullPointer;
    }
    let dir = match utf8_arg(dir) {
        Ok(t) => t,
        Err(s) => return s,
    };
    if let Err(e) = std::fs::create_dir_all(dir) {
        return fail(Error::Io(e));
    }
    match datagen::write_dataset(&(*ds).inner, Path::new(dir)) {
        Ok(()) => TsmStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Number of snippets in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tsm_dataset_len(ds: *const TsmDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.len()
    }
}

/// # Safety
/// `ds` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsm_dataset_free(ds: *mut TsmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train on `ds`, splitting train/test internally per the config.
///
/// # Safety
/// `config_json` must be NUL-terminated; `ds` a valid dataset handle;
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsm_train(
    config_json: *const c_char,
    ds: *const TsmDataset,
    out: *mut *mut TsmCheckpoint,
) -> TsmStatus {
    if ds.is_null() || out.is_null() {
        set_error("null handle or output pointer");
        return TsmStatus::NullPointer;
    }
    let text = match utf8_arg(config_json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let cfg = match parse_config(text) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let result = datagen::split(&(*ds).inner, cfg.train.train_fraction, cfg.train.seed).and_then(
        |(tr, te)| {
            trainer::train(&cfg.model, &cfg.train, &cfg.dataset, &tr, &te, cfg.eval.k)
                .map(|(ckpt, _history)| ckpt)
        },
    );
    match result {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(TsmCheckpoint { inner: ckpt }));
            TsmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ckpt` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tsm_checkpoint_save(
    ckpt: *const TsmCheckpoint,
    dir: *const c_char,
) -> TsmStatus {
    if ckpt.is_null() {
        set_error("null checkpoint handle");
        return TsmStatus::NullPointer;
    }
    let dir = match utf8_arg(dir) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match trainer::save_checkpoint(&(*ckpt).inner, Path::new(dir)) {
        Ok(()) => TsmStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dir` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsm_checkpoint_load(
    dir: *const c_char,
    out: *mut *mut TsmCheckpoint,
) -> TsmStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TsmStatus::NullPointer;
    }
    let dir = match utf8_arg(dir) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match trainer::load_checkpoint(Path::new(dir)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(TsmCheckpoint { inner: ckpt }));
            TsmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ckpt` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsm_checkpoint_free(ckpt: *mut TsmCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// k-NN evaluation: the dataset is re-split with the checkpoint's stored
/// fraction and seed, the train side is the gallery, the test side the
/// queries. On success `*json_out` holds a JSON report string.
///
/// # Safety
/// `ckpt` and `ds` must be valid handles; `json_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsm_evaluate(
    ckpt: *const TsmCheckpoint,
    ds: *const TsmDataset,
    k: usize,
    json_out: *mut *mut c_char,
) -> TsmStatus {
    if ckpt.is_null() || ds.is_null() || json_out.is_null() {
        set_error("null handle or output pointer");
        return TsmStatus::NullPointer;
    }
    let ckpt = &(*ckpt).inner;
    let result = datagen::split(&(*ds).inner, ckpt.train.train_fraction, ckpt.train.seed).and_then(
        |(tr, te)| {
            evaluator::evaluate(
                &ckpt.params,
                &ckpt.model,
                &tr,
                &te,
                k,
                &ckpt.dataset.head_classes,
            )
        },
    );
    match result {
        Ok(report) => match serde_json::to_string(&report) {
            Ok(json) => {
                let c = CString::new(json).unwrap_or_default();
                *json_out = c.into_raw();
                TsmStatus::Ok
            }
            Err(e) => {
                set_error(&format!("serialization failed: {e}"));
                TsmStatus::Io
            }
        },
        Err(e) => fail(e),
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
