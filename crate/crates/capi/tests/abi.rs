//! Exercises the C surface from Rust: handle lifecycle, error paths,
//! string ownership, and agreement with the core library.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use rsl_capi::{
    rsl_bleu, rsl_last_error, rsl_log_prob, rsl_model_arch, rsl_model_direction, rsl_model_free,
    rsl_model_load, rsl_model_save, rsl_string_free, rsl_translate, rsl_version, RslStatus,
};
use rsl_core::corpus::{write_vocab, Vocabulary};
use rsl_core::models::{init_model, ArchitectureSpec, Direction};
use rsl_core::training::Checkpoint;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rsl_last_error()) }.to_str().unwrap().to_string()
}

/// Checkpoint and vocab files for a small untrained model, returning
/// their paths.
fn fixture(dir: &Path) -> (CString, CString, CString) {
    let vocab = Vocabulary::from_content(["a", "b", "c", "d", "e", "f"].map(String::from)).unwrap();
    let mut arch = ArchitectureSpec::attention();
    arch.d_model = 8;
    arch.ffn_width = 16;
    arch.dropout = 0.0;
    let model = init_model(arch, Direction::L2R, &vocab, &vocab, 0, 42).unwrap();
    let ckpt = dir.join("m.ckpt");
    Checkpoint::from_model(&model, None, 0, None).save(&ckpt).unwrap();
    let vpath = dir.join("vocab.txt");
    write_vocab(&vocab, &vpath).unwrap();
    let v = c(vpath.to_str().unwrap());
    (c(ckpt.to_str().unwrap()), v.clone(), v)
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(rsl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle_translate_score_save() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, src_v, tgt_v) = fixture(dir.path());
    let model = unsafe { rsl_model_load(ckpt.as_ptr(), src_v.as_ptr(), tgt_v.as_ptr()) };
    assert!(!model.is_null(), "{}", last_error());

    let arch = unsafe { CStr::from_ptr(rsl_model_arch(model)) }.to_str().unwrap();
    assert_eq!(arch, "attention");
    let dir_s = unsafe { CStr::from_ptr(rsl_model_direction(model)) }.to_str().unwrap();
    assert_eq!(dir_s, "l2r");

    let source = c("a b c");
    let mut out: *mut c_char = std::ptr::null_mut();
    let status = unsafe { rsl_translate(model, source.as_ptr(), 2, 0.6, 6, &mut out) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    assert!(!out.is_null());
    let first = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { rsl_string_free(out) };

    // beam search is deterministic
    let mut again: *mut c_char = std::ptr::null_mut();
    let status = unsafe { rsl_translate(model, source.as_ptr(), 2, 0.6, 6, &mut again) };
    assert_eq!(status, RslStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(again) }.to_str().unwrap(), first);
    unsafe { rsl_string_free(again) };

    let target = c("d e");
    let mut lp = f64::NAN;
    let status = unsafe { rsl_log_prob(model, source.as_ptr(), target.as_ptr(), &mut lp) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    assert!(lp.is_finite() && lp < 0.0, "log prob {lp}");

    // scoring the model's own translation works even when it is empty
    let hyp = c(&first);
    let status = unsafe { rsl_log_prob(model, source.as_ptr(), hyp.as_ptr(), &mut lp) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    assert!(lp.is_finite() && lp < 0.0);

    // resaving reproduces the original checkpoint byte for byte
    let resaved = dir.path().join("resaved.ckpt");
    let rpath = c(resaved.to_str().unwrap());
    let status = unsafe { rsl_model_save(model, rpath.as_ptr()) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    let original = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(std::fs::read(&resaved).unwrap(), original);

    unsafe { rsl_model_free(model) };
}

#[test]
fn null_and_bad_inputs_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, src_v, tgt_v) = fixture(dir.path());

    let model = unsafe { rsl_model_load(std::ptr::null(), src_v.as_ptr(), tgt_v.as_ptr()) };
    assert!(model.is_null());
    assert!(last_error().contains("checkpoint_path"), "{}", last_error());

    let missing = c(dir.path().join("absent.ckpt").to_str().unwrap());
    let model = unsafe { rsl_model_load(missing.as_ptr(), src_v.as_ptr(), tgt_v.as_ptr()) };
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let mut out: *mut c_char = std::ptr::null_mut();
    let status = unsafe { rsl_translate(std::ptr::null(), c("a").as_ptr(), 2, 0.6, 4, &mut out) };
    assert_eq!(status, RslStatus::NullArgument);
    assert!(out.is_null());

    let model = unsafe { rsl_model_load(ckpt.as_ptr(), src_v.as_ptr(), tgt_v.as_ptr()) };
    assert!(!model.is_null());
    let bad = c"\xff\xfe";
    let mut lp = 0.0;
    let status = unsafe { rsl_log_prob(model, bad.as_ptr(), c("a").as_ptr(), &mut lp) };
    assert_eq!(status, RslStatus::InvalidUtf8);

    // an empty source line cannot be translated
    let status = unsafe { rsl_translate(model, c("").as_ptr(), 2, 0.6, 4, &mut out) };
    assert_eq!(status, RslStatus::BadData);
    assert!(out.is_null());

    unsafe { rsl_model_free(model) };
    unsafe { rsl_model_free(std::ptr::null_mut()) };
    unsafe { rsl_string_free(std::ptr::null_mut()) };
    assert!(unsafe { rsl_model_arch(std::ptr::null()) }.is_null());
    assert!(unsafe { rsl_model_direction(std::ptr::null()) }.is_null());
}

#[test]
fn bleu_matches_the_analytic_values() {
    let mut bleu = f64::NAN;
    let status = unsafe { rsl_bleu(c("a b c d").as_ptr(), c("a b c d e").as_ptr(), &mut bleu) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    assert!((bleu - 100.0 * (-0.25_f64).exp()).abs() < 1e-6, "bleu {bleu}");

    let block = c("a b c\nd e f\na a b b");
    let status = unsafe { rsl_bleu(block.as_ptr(), block.as_ptr(), &mut bleu) };
    assert_eq!(status, RslStatus::Ok);
    assert_eq!(bleu, 100.0);

    // empty hypothesis lines score, they just earn no matches
    let status = unsafe { rsl_bleu(c("\na b c").as_ptr(), c("a b\na b c").as_ptr(), &mut bleu) };
    assert_eq!(status, RslStatus::Ok, "{}", last_error());
    assert!((0.0..100.0).contains(&bleu), "bleu {bleu}");

    let status = unsafe { rsl_bleu(c("a\nb").as_ptr(), c("a").as_ptr(), &mut bleu) };
    assert_eq!(status, RslStatus::BadData);
    assert!(last_error().contains("lines"), "{}", last_error());
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/rsl.h")).unwrap();
    for needle in [
        "RSL_CAPI_H",
        "RslStatus",
        "rsl_model_load",
        "rsl_model_free",
        "rsl_translate",
        "rsl_log_prob",
        "rsl_bleu",
        "rsl_string_free",
        "rsl_last_error",
        "rsl_version",
    ] {
        assert!(header.contains(needle), "header is missing {needle}");
    }
}
