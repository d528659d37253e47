//! C ABI over the core library: load checkpoints, translate single
//! sentences, score pairs, and compute corpus BLEU from an embedding
//! host. Handles are opaque; every entry point is panic-safe and
//! reports failures through [`RslStatus`] plus a per-thread message
//! readable via [`rsl_last_error`].
//!
//! Ownership rules: `rsl_model_load` transfers ownership to the caller,
//! who must release with `rsl_model_free`; strings returned through out
//! parameters must be released with `rsl_string_free`. Pointers from
//! `rsl_last_error`, `rsl_model_arch`, and `rsl_model_direction` are
//! borrowed and must not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rsl_core::corpus::{read_vocab, TokenSeq, Vocabulary};
use rsl_core::decoding::{beam_search_single, DecodeConfig};
use rsl_core::eval::corpus_bleu;
use rsl_core::models::{BasicModel, Direction};
use rsl_core::training::Checkpoint;

/// Result of every fallible call. Zero is success; anything else left
/// a message in `rsl_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RslStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    BadData = 4,
    DecodeFailed = 5,
    Internal = 6,
}

/// Opaque translation model: parameters plus both vocabularies.
pub struct RslModel {
    inner: BasicModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: RslStatus, msg: &str) -> RslStatus {
    set_error(msg);
    status
}

/// Runs a body with panics converted to `Internal`, so unwinding never
/// crosses the ABI boundary.
fn guarded(body: impl FnOnce() -> RslStatus) -> RslStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(RslStatus::Internal, "internal panic"),
    }
}

/// SAFETY: `ptr` must be null or a NUL-terminated string valid for the
/// duration of the call.
unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, RslStatus> {
    if ptr.is_null() {
        return Err(fail(RslStatus::NullArgument, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(RslStatus::InvalidUtf8, &format!("{name} is not UTF-8")))
}

fn parse_line(line: &str, vocab: &Vocabulary, side: &str) -> Result<TokenSeq, RslStatus> {
    let ids: Vec<u32> = line.split_whitespace().map(|t| vocab.id(t)).collect();
    match side {
        "source" => TokenSeq::source(ids, vocab),
        _ if ids.is_empty() => Ok(TokenSeq::empty_target()),
        _ => TokenSeq::target_from_content(ids, vocab),
    }
    .map_err(|e| fail(RslStatus::BadData, &format!("{side} line: {e}")))
}

/// Version of the underlying library, as a static string.
#[no_mangle]
pub extern "C" fn rsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Borrowed; valid
/// until the next failing call on the same thread. Empty if none.
#[no_mangle]
pub extern "C" fn rsl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint plus its two vocabulary files. Returns null on
/// failure (see `rsl_last_error`). The handle must be released with
/// `rsl_model_free`.
///
/// # Safety
/// All three arguments must be null or NUL-terminated strings valid
/// for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn rsl_model_load(
    checkpoint_path: *const c_char,
    source_vocab_path: *const c_char,
    target_vocab_path: *const c_char,
) -> *mut RslModel {
    let mut out: *mut RslModel = std::ptr::null_mut();
    let _ = guarded(|| {
        let ckpt_path = match required_str(checkpoint_path, "checkpoint_path") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let src_path = match required_str(source_vocab_path, "source_vocab_path") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let tgt_path = match required_str(target_vocab_path, "target_vocab_path") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let src = match read_vocab(Path::new(src_path)) {
            Ok(v) => v,
            Err(e) => return fail(RslStatus::BadData, &e.to_string()),
        };
        let tgt = match read_vocab(Path::new(tgt_path)) {
            Ok(v) => v,
            Err(e) => return fail(RslStatus::BadData, &e.to_string()),
        };
        let ckpt = match Checkpoint::load(Path::new(ckpt_path)) {
            Ok(c) => c,
            Err(e) => return fail(RslStatus::BadData, &e.to_string()),
        };
        match ckpt.into_model(0, &src, &tgt) {
            Ok(inner) => {
                out = Box::into_raw(Box::new(RslModel { inner }));
                RslStatus::Ok
            }
            Err(e) => fail(RslStatus::BadData, &e.to_string()),
        }
    });
    out
}

/// Saves the model as a checkpoint file (no optimizer state).
///
/// # Safety
/// `model` must be null or a live handle from `rsl_model_load`; `path`
/// must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rsl_model_save(model: *const RslModel, path: *const c_char) -> RslStatus {
    guarded(|| {
        if model.is_null() {
            return fail(RslStatus::NullArgument, "model is null");
        }
        let path = match required_str(path, "path") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let inner = &(*model).inner;
        let ckpt = Checkpoint::from_model(inner, None, 0, None);
        match ckpt.save(Path::new(path)) {
            Ok(()) => RslStatus::Ok,
            Err(e) => fail(RslStatus::BadData, &e.to_string()),
        }
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a live handle from `rsl_model_load`, not
/// used again afterwards.
#[no_mangle]
pub unsafe extern "C" fn rsl_model_free(model: *mut RslModel) {
    if !model.is_null() {
        let _ = guarded(|| {
            drop(Box::from_raw(model));
            RslStatus::Ok
        });
    }
}

/// Architecture name ("attention", "recurrent", "convolutional") as a
/// static string; null if `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rsl_model_arch(model: *const RslModel) -> *const c_char {
    if model.is_null() {
        return std::ptr::null();
    }
    match (*model).inner.arch.kind {
        rsl_core::models::ArchKind::Attention => c"attention".as_ptr(),
        rsl_core::models::ArchKind::Recurrent => c"recurrent".as_ptr(),
        rsl_core::models::ArchKind::Convolutional => c"convolutional".as_ptr(),
    }
}

/// Generation direction ("l2r" or "r2l") as a static string; null if
/// `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rsl_model_direction(model: *const RslModel) -> *const c_char {
    if model.is_null() {
        return std::ptr::null();
    }
    match (*model).inner.direction {
        Direction::L2R => c"l2r".as_ptr(),
        Direction::R2L => c"r2l".as_ptr(),
    }
}

/// Translates one whitespace-tokenized source line with beam search.
/// Unknown tokens map to the unk id. On success `*out_target` holds a
/// malloc-style string the caller releases with `rsl_string_free`.
///
/// # Safety
/// `model` must be a live handle; `source_line` a NUL-terminated
/// string; `out_target` a valid destination pointer. Nulls are
/// reported as `NullArgument`.
#[no_mangle]
pub unsafe extern "C" fn rsl_translate(
    model: *const RslModel,
    source_line: *const c_char,
    beam: usize,
    alpha: f64,
    max_len: usize,
    out_target: *mut *mut c_char,
) -> RslStatus {
    guarded(|| {
        if model.is_null() || out_target.is_null() {
            return fail(RslStatus::NullArgument, "model or out_target is null");
        }
        let line = match required_str(source_line, "source_line") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let inner = &(*model).inner;
        let x = match parse_line(line, &inner.source_vocab, "source") {
            Ok(x) => x,
            Err(e) => return e,
        };
        let cfg = DecodeConfig { beam, alpha, max_len, lambda: 0.0, groups: 1 };
        let mut hyps = match beam_search_single(inner, &x, &cfg) {
            Ok(h) => h,
            Err(e) => return fail(RslStatus::DecodeFailed, &e.to_string()),
        };
        if hyps.is_empty() {
            return fail(RslStatus::DecodeFailed, "beam search returned no hypotheses");
        }
        let best = hyps.swap_remove(0);
        let line = best.tokens.to_line(&inner.target_vocab);
        match CString::new(line) {
            Ok(s) => {
                *out_target = s.into_raw();
                RslStatus::Ok
            }
            Err(_) => fail(RslStatus::Internal, "translation contained an interior NUL"),
        }
    })
}

/// Log-probability of a whitespace-tokenized target line given a
/// source line, written to `*out_log_prob`.
///
/// # Safety
/// Same pointer rules as `rsl_translate`.
#[no_mangle]
pub unsafe extern "C" fn rsl_log_prob(
    model: *const RslModel,
    source_line: *const c_char,
    target_line: *const c_char,
    out_log_prob: *mut f64,
) -> RslStatus {
    guarded(|| {
        if model.is_null() || out_log_prob.is_null() {
            return fail(RslStatus::NullArgument, "model or out_log_prob is null");
        }
        let src = match required_str(source_line, "source_line") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let tgt = match required_str(target_line, "target_line") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let inner = &(*model).inner;
        let x = match parse_line(src, &inner.source_vocab, "source") {
            Ok(x) => x,
            Err(e) => return e,
        };
        let y = match parse_line(tgt, &inner.target_vocab, "target") {
            Ok(y) => y,
            Err(e) => return e,
        };
        match inner.log_prob(&x, &y) {
            Ok(lp) => {
                *out_log_prob = lp;
                RslStatus::Ok
            }
            Err(e) => fail(RslStatus::BadData, &e.to_string()),
        }
    })
}

/// Corpus BLEU between newline-separated, whitespace-tokenized
/// hypothesis and reference blocks (one sentence per line, equal line
/// counts). Written to `*out_bleu` on the 0-100 scale.
///
/// # Safety
/// Both blocks must be null or NUL-terminated strings; `out_bleu` a
/// valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn rsl_bleu(
    hypothesis_lines: *const c_char,
    reference_lines: *const c_char,
    out_bleu: *mut f64,
) -> RslStatus {
    guarded(|| {
        if out_bleu.is_null() {
            return fail(RslStatus::NullArgument, "out_bleu is null");
        }
        let hyp_block = match required_str(hypothesis_lines, "hypothesis_lines") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let ref_block = match required_str(reference_lines, "reference_lines") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let hyp_lines: Vec<&str> = hyp_block.lines().collect();
        let ref_lines: Vec<&str> = ref_block.lines().collect();
        if hyp_lines.len() != ref_lines.len() {
            return fail(
                RslStatus::BadData,
                &format!("{} hypothesis lines vs {} reference lines", hyp_lines.len(), ref_lines.len()),
            );
        }
        // ad-hoc vocabulary over the union of surface tokens, so BLEU
        // depends only on token identity
        let mut seen = std::collections::BTreeSet::new();
        for line in hyp_lines.iter().chain(&ref_lines) {
            seen.extend(line.split_whitespace().map(String::from));
        }
        let vocab = match Vocabulary::from_content(seen) {
            Ok(v) => v,
            Err(e) => return fail(RslStatus::BadData, &e.to_string()),
        };
        let parse_all = |lines: &[&str]| -> Result<Vec<TokenSeq>, RslStatus> {
            lines.iter().map(|l| parse_line(l, &vocab, "target")).collect()
        };
        let hyps = match parse_all(&hyp_lines) {
            Ok(v) => v,
            Err(e) => return e,
        };
        let refs = match parse_all(&ref_lines) {
            Ok(v) => v,
            Err(e) => return e,
        };
        match corpus_bleu(&hyps, &refs) {
            Ok(report) => {
                *out_bleu = report.bleu;
                RslStatus::Ok
            }
            Err(e) => fail(RslStatus::BadData, &e.to_string()),
        }
    })
}

/// Releases a string returned through an out parameter. Null is a
/// no-op.
///
/// # Safety
/// `s` must be null or a pointer previously produced by this library,
/// not used again afterwards.
#[no_mangle]
pub unsafe extern "C" fn rsl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
