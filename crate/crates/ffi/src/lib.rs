//! C interface to trained sentvae models.
//!
//! Every fallible function returns an [`SvStatus`]; on failure a message is
//! available from [`sv_last_error`] on the same thread. Handles are opaque
//! and released with their `_free` function. Strings returned through out
//! pointers are owned by the caller and released with [`sv_string_free`].
//!
//! Sentences are tokenised on whitespace with digits masked to `#`, the
//! same way the command-line tool reads its input.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sentvae::checkpoint::Checkpoint;
use sentvae::data::{tokenize, LoadOptions, Pair, Sentence};
use sentvae::decode::{compress, DecodeMode};
use sentvae::error::Error;
use sentvae::eval::{rouge_l, rouge_n, RougeScore};
use sentvae::fsc::fsc_log_prob;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    InvalidArgument = 1,
    /// Malformed input data.
    Data = 2,
    /// A non-finite value was produced.
    Numerical = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    /// Corrupt, truncated or incompatible checkpoint.
    Checkpoint = 6,
    MissingComponent = 7,
    Io = 8,
    /// A compression word does not occur in the source.
    UnsupportedSequence = 9,
    /// An internal panic was caught at the boundary.
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvDecodeMode {
    /// Pointer only: output words are copied from the source.
    Extractive = 0,
    /// Copy or generate from the compression vocabulary.
    Abstractive = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SvRougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SvRouge {
    pub rouge_1: SvRougeScore,
    pub rouge_2: SvRougeScore,
    pub rouge_l: SvRougeScore,
}

/// A loaded model checkpoint.
pub struct SvModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(err: &Error) -> SvStatus {
    match err {
        Error::Shape { .. } | Error::InvalidArgument(_) => SvStatus::InvalidArgument,
        Error::UnsupportedSequence(_) => SvStatus::UnsupportedSequence,
        Error::Data { .. } => SvStatus::Data,
        Error::Checkpoint(_) => SvStatus::Checkpoint,
        Error::MissingComponent(_) => SvStatus::MissingComponent,
        Error::Numerical(_) => SvStatus::Numerical,
        Error::Io(_) => SvStatus::Io,
    }
}

struct Failure(SvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `body`, recording any error or panic for [`sv_last_error`].
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SvStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {message}"));
            SvStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or points to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SvStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SvStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_sentence(p: *const c_char, what: &str) -> Result<Sentence, Failure> {
    let s = tokenize(read_str(p, what)?, LoadOptions::default());
    if s.is_empty() {
        return Err(Failure(
            SvStatus::InvalidArgument,
            format!("{what} has no tokens"),
        ));
    }
    Ok(s)
}

fn model_ref<'a>(model: *const SvModel) -> Result<&'a SvModel, Failure> {
    // SAFETY: non-null handles come from `sv_model_load` and are live until freed.
    unsafe { model.as_ref() }.ok_or_else(|| Failure(SvStatus::NullPointer, "model is null".into()))
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(
            SvStatus::NullPointer,
            "output pointer is null".into(),
        ))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model checkpoint written by `sentvae train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_model_load(path: *const c_char, out: *mut *mut SvModel) -> SvStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SvModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`sv_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_model_free(model: *mut SvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Optimiser steps the checkpointed model was trained for.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_model_steps(model: *const SvModel, out: *mut u64) -> SvStatus {
    guard(|| {
        check_out(out)?;
        *out = model_ref(model)?.checkpoint.step;
        Ok(())
    })
}

/// Beam-decodes one sentence. `mode` is an [`SvDecodeMode`] value and
/// `beam_size` 0 selects the checkpoint's configured width. On success
/// `*out` receives the space-separated compression.
///
/// # Safety
/// `model` must be a live handle, `sentence` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_compress(
    model: *const SvModel,
    sentence: *const c_char,
    mode: u32,
    beam_size: usize,
    out: *mut *mut c_char,
) -> SvStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let m = &model_ref(model)?.checkpoint;
        let mode = match mode {
            0 => DecodeMode::Extractive,
            1 => DecodeMode::Abstractive,
            other => {
                return Err(Failure(
                    SvStatus::InvalidArgument,
                    format!("unknown decode mode {other}"),
                ))
            }
        };
        let words = read_sentence(sentence, "sentence")?;
        let beam = if beam_size == 0 {
            m.training.beam_size
        } else {
            beam_size
        };
        let src = m.model.view(&words)?;
        let c = compress(&m.model, &src, mode, beam, None)?;
        let text = CString::new(c.words.join(" "))
            .map_err(|_| Failure(SvStatus::InvalidUtf8, "compression contains NUL".into()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// Log-probability of `compression` given `source` under the
/// forced-attention model, end symbol included.
///
/// # Safety
/// `model` must be a live handle, both strings NUL-terminated and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sv_compression_log_prob(
    model: *const SvModel,
    source: *const c_char,
    compression: *const c_char,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        check_out(out)?;
        let m = &model_ref(model)?.checkpoint.model;
        let pair = Pair {
            source: read_sentence(source, "source")?,
            compression: read_sentence(compression, "compression")?,
        };
        let src = m.view(&pair.source)?;
        *out = fsc_log_prob(
            &m.store,
            &m.compression,
            &m.fsc,
            &m.vocabs.compressor,
            &src,
            &pair,
        )?;
        Ok(())
    })
}

fn score(s: RougeScore) -> SvRougeScore {
    SvRougeScore {
        recall: s.recall,
        precision: s.precision,
        f1: s.f1,
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one candidate against one reference.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sv_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut SvRouge,
) -> SvStatus {
    guard(|| {
        check_out(out)?;
        let opts = LoadOptions { mask_digits: false };
        let c = tokenize(read_str(candidate, "candidate")?, opts);
        let r = tokenize(read_str(reference, "reference")?, opts);
        *out = SvRouge {
            rouge_1: score(rouge_n(&c, &r, 1)?),
            rouge_2: score(rouge_n(&c, &r, 2)?),
            rouge_l: score(rouge_l(&c, &r)),
        };
        Ok(())
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
