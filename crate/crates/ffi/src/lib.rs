//! C interface to the brltm core.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`BrltmStatus`]; on failure [`brltm_last_error`] describes the cause until
//! the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use brltm::interpret::{self, HeadAgg};
use brltm::model::{self, Model};
use brltm::sequencer::{Segment, TokenSequence};
use brltm::vocab::Vocabulary;
use brltm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrltmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Incompatible = 5,
    Numeric = 6,
    Panic = 7,
}

/// Loaded vocabulary.
pub struct BrltmVocab {
    inner: Vocabulary,
}

/// Loaded model.
pub struct BrltmModel {
    inner: Model,
}

/// One patient sequence. `segments` holds 0 for A and 1 for B; `gender` is
/// 0 for F and 1 for M. Positions are `0..len`.
#[repr(C)]
pub struct BrltmSequence {
    pub tokens: *const u32,
    pub segments: *const u8,
    pub ages: *const i32,
    pub len: usize,
    pub gender: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BrltmStatus {
    match e {
        Error::Io { .. } => BrltmStatus::Io,
        Error::Parse { .. } | Error::Format(_) => BrltmStatus::Format,
        Error::Incompatible(_) => BrltmStatus::Incompatible,
        Error::NonFinite { .. } | Error::Degenerate(_) | Error::UndefinedMetric(_) => BrltmStatus::Numeric,
        _ => BrltmStatus::InvalidArgument,
    }
}

struct Fail(BrltmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BrltmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BrltmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BrltmStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BrltmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BrltmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn sequence(seq: *const BrltmSequence) -> Result<TokenSequence, Fail> {
    let s = handle(seq, "sequence")?;
    if s.len > 0 && (s.tokens.is_null() || s.segments.is_null() || s.ages.is_null()) {
        return Err(null("sequence array"));
    }
    let (tokens, segments, ages) = if s.len == 0 {
        (&[][..], &[][..], &[][..])
    } else {
        (
            std::slice::from_raw_parts(s.tokens, s.len),
            std::slice::from_raw_parts(s.segments, s.len),
            std::slice::from_raw_parts(s.ages, s.len),
        )
    };
    let segments = segments
        .iter()
        .map(|&v| match v {
            0 => Ok(Segment::A),
            1 => Ok(Segment::B),
            other => Err(Fail(BrltmStatus::InvalidArgument, format!("segment {other} is neither 0 nor 1"))),
        })
        .collect::<Result<_, _>>()?;
    if s.gender > 1 {
        return Err(Fail(BrltmStatus::InvalidArgument, format!("gender {} is neither 0 nor 1", s.gender)));
    }
    Ok(TokenSequence {
        tokens: tokens.iter().map(|&t| t as usize).collect(),
        positions: (0..s.len).collect(),
        segments,
        ages: ages.to_vec(),
        gender: s.gender as usize,
        pad_mask: vec![true; s.len],
        mlm_targets: None,
        class_label: None,
    })
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call.
#[no_mangle]
pub extern "C" fn brltm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn brltm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn brltm_vocab_load(path: *const c_char, out: *mut *mut BrltmVocab) -> BrltmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Vocabulary::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BrltmVocab { inner }));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from `brltm_vocab_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn brltm_vocab_free(vocab: *mut BrltmVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of tokens, specials included; 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn brltm_vocab_len(vocab: *const BrltmVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.len())
}

/// Id of `token`; unknown tokens map to the UNK id.
///
/// # Safety
/// `vocab` must be a live handle, `token` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn brltm_vocab_id(vocab: *const BrltmVocab, token: *const c_char, out: *mut u32) -> BrltmStatus {
    guard(|| {
        let v = handle(vocab, "vocab")?;
        let out = out_arg(out, "out")?;
        *out = v.inner.id_of(str_arg(token, "token")?) as u32;
        Ok(())
    })
}

/// Loads a checkpoint; with a non-null `vocab` its content hash must match.
///
/// # Safety
/// `path` must be NUL-terminated, `vocab` null or live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_load(
    path: *const c_char,
    vocab: *const BrltmVocab,
    out: *mut *mut BrltmModel,
) -> BrltmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = vocab.as_ref().map(|v| &v.inner);
        let inner = model::load_checkpoint(str_arg(path, "path")?, v)?.into_model();
        *out = Box::into_raw(Box::new(BrltmModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `brltm_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_free(model: *mut BrltmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size the model was built for; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_vocab_size(model: *const BrltmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.vocab_size)
}

/// Longest accepted sequence; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_max_len(model: *const BrltmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.max_len)
}

/// Positive-class probability from a fine-tuned model.
///
/// # Safety
/// `model` must be live, `seq` valid with arrays of `len` elements, `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_predict(
    model: *const BrltmModel,
    seq: *const BrltmSequence,
    out: *mut f64,
) -> BrltmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out_arg(out, "out")?;
        if m.inner.weights.classifier.is_none() {
            return Err(Fail(BrltmStatus::Incompatible, "model has no classification head".into()));
        }
        *out = m.inner.predict(&sequence(seq)?)?;
        Ok(())
    })
}

/// Masked-code logits, `len × vocab_size` row-major, into `out` of
/// `out_len` elements.
///
/// # Safety
/// As for `brltm_model_predict`; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_mlm_logits(
    model: *const BrltmModel,
    seq: *const BrltmSequence,
    out: *mut f64,
    out_len: usize,
) -> BrltmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = sequence(seq)?;
        let need = s.len() * m.inner.config.vocab_size;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < need {
            return Err(Fail(BrltmStatus::InvalidArgument, format!("output holds {out_len} values, {need} needed")));
        }
        let logits = m.inner.mlm_logits(&s)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Head-aggregated attention row of position `query` at `layer`
/// (`-1` for the last) into `out` of `out_len >= len` elements.
/// `max_heads` selects max over heads instead of the mean.
///
/// # Safety
/// As for `brltm_model_mlm_logits`.
#[no_mangle]
pub unsafe extern "C" fn brltm_model_attention_row(
    model: *const BrltmModel,
    seq: *const BrltmSequence,
    layer: i32,
    query: usize,
    max_heads: bool,
    out: *mut f64,
    out_len: usize,
) -> BrltmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = sequence(seq)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < s.len() {
            return Err(Fail(BrltmStatus::InvalidArgument, format!("output holds {out_len} values, {} needed", s.len())));
        }
        let map = m.inner.infer(&s)?.attention;
        let layer = if layer < 0 { map.n_layers().saturating_sub(1) } else { layer as usize };
        let agg = if max_heads { HeadAgg::Max } else { HeadAgg::Mean };
        let row = interpret::aggregated_row(&map, query, layer, agg)?;
        std::slice::from_raw_parts_mut(out, row.len()).copy_from_slice(&row);
        Ok(())
    })
}
