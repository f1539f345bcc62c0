use std::ffi::{c_char, CString};
use std::ptr;

use nsmc_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { nsmc_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn toy() -> *mut NsmcModel {
    let name = CString::new("conjugate-toy").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nsmc_model_new(name.as_ptr(), ptr::null(), &mut m) }, NsmcStatus::Ok);
    assert!(!m.is_null());
    m
}

fn small_config() -> NsmcTrainConfig {
    NsmcTrainConfig { n_train: 500, n_validate: 100, minibatch: 50, max_steps_per_epoch: 20, n_epochs: 2, ..nsmc_train_config_default() }
}

#[test]
fn unknown_model_is_invalid_argument() {
    let name = CString::new("nope").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { nsmc_model_new(name.as_ptr(), ptr::null(), &mut m) };
    assert_eq!(s, NsmcStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("nope"));
}

#[test]
fn malformed_params_are_rejected() {
    let name = CString::new("pump").unwrap();
    let params = CString::new("n=3;hidden").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { nsmc_model_new(name.as_ptr(), params.as_ptr(), &mut m) };
    assert_eq!(s, NsmcStatus::InvalidArgument);
}

#[test]
fn null_pointers_are_reported() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nsmc_model_new(ptr::null(), ptr::null(), &mut m) }, NsmcStatus::NullPointer);
    let mut r = NsmcInferResult::default();
    let s = unsafe { nsmc_infer(ptr::null(), ptr::null(), ptr::null(), 10, 0, ptr::null_mut(), 0, &mut r) };
    assert_eq!(s, NsmcStatus::NullPointer);
    unsafe {
        nsmc_model_free(ptr::null_mut());
        nsmc_artifact_free(ptr::null_mut());
    }
    assert_eq!(unsafe { nsmc_model_num_latents(ptr::null()) }, 0);
}

#[test]
fn model_counts_and_description() {
    let name = CString::new("pump").unwrap();
    let params = CString::new("n=4").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nsmc_model_new(name.as_ptr(), params.as_ptr(), &mut m) }, NsmcStatus::Ok);
    unsafe {
        assert_eq!(nsmc_model_num_latents(m), 2 + 4);
        assert!(nsmc_model_num_factors(m) >= 1);
        assert!(nsmc_model_num_networks(m) >= 1);
        let mut len = 0usize;
        assert_eq!(nsmc_model_describe(m, ptr::null_mut(), 0, &mut len), NsmcStatus::Ok);
        assert!(len > 0);
        let mut buf = vec![0 as c_char; len + 1];
        assert_eq!(nsmc_model_describe(m, buf.as_mut_ptr(), buf.len(), ptr::null_mut()), NsmcStatus::Ok);
        assert_eq!(buf[len], 0);
        nsmc_model_free(m);
    }
}

#[test]
fn prior_inference_on_toy() {
    let m = toy();
    let n = unsafe { nsmc_model_num_latents(m) };
    let mut means = vec![f64::NAN; n];
    let mut r = NsmcInferResult::default();
    let s = unsafe { nsmc_infer(m, ptr::null(), ptr::null(), 2000, 3, means.as_mut_ptr(), n, &mut r) };
    assert_eq!(s, NsmcStatus::Ok, "{}", last_error());
    assert!(r.log_evidence.is_finite());
    assert!(r.final_ess > 0.0 && r.final_ess <= 2000.0);
    assert!(means.iter().all(|v| v.is_finite()));
    let mut wrong = vec![0.0; n + 1];
    let s = unsafe { nsmc_infer(m, ptr::null(), ptr::null(), 10, 3, wrong.as_mut_ptr(), n + 1, &mut r) };
    assert_eq!(s, NsmcStatus::InvalidArgument);
    unsafe { nsmc_model_free(m) };
}

#[test]
fn train_save_load_infer() {
    let m = toy();
    let cfg = small_config();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { nsmc_train(m, &cfg, &mut a) }, NsmcStatus::Ok, "{}", last_error());
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.json").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(nsmc_artifact_save(a, path.as_ptr()), NsmcStatus::Ok);
        nsmc_artifact_free(a);
    }
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { nsmc_artifact_load(path.as_ptr(), &mut b) }, NsmcStatus::Ok);
    let mut r1 = NsmcInferResult::default();
    let mut r2 = NsmcInferResult::default();
    unsafe {
        assert_eq!(nsmc_infer(m, b, ptr::null(), 500, 9, ptr::null_mut(), 0, &mut r1), NsmcStatus::Ok);
        assert_eq!(nsmc_infer(m, b, ptr::null(), 500, 9, ptr::null_mut(), 0, &mut r2), NsmcStatus::Ok);
    }
    assert!(r1.log_evidence.is_finite());
    assert_eq!(r1.log_evidence.to_bits(), r2.log_evidence.to_bits());

    let name = CString::new("pump").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(nsmc_model_new(name.as_ptr(), ptr::null(), &mut p), NsmcStatus::Ok);
        let s = nsmc_infer(p, b, ptr::null(), 10, 0, ptr::null_mut(), 0, &mut r1);
        assert_eq!(s, NsmcStatus::Artifact);
        nsmc_model_free(p);
        nsmc_artifact_free(b);
        nsmc_model_free(m);
    }
}

#[test]
fn missing_files_are_io_errors() {
    let path = CString::new("/nonexistent/nsmc/artifact.json").unwrap();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { nsmc_artifact_load(path.as_ptr(), &mut a) }, NsmcStatus::Io);
    let m = toy();
    let mut r = NsmcInferResult::default();
    let s = unsafe { nsmc_infer(m, ptr::null(), path.as_ptr(), 10, 0, ptr::null_mut(), 0, &mut r) };
    assert_eq!(s, NsmcStatus::Io);
    unsafe { nsmc_model_free(m) };
}

#[test]
fn corrupt_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    std::fs::write(&file, "{\"format\": \"something-else\"}").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { nsmc_artifact_load(path.as_ptr(), &mut a) }, NsmcStatus::Artifact);
    assert!(a.is_null());
}

#[test]
fn invalid_train_config() {
    let m = toy();
    let cfg = NsmcTrainConfig { minibatch: 0, ..small_config() };
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { nsmc_train(m, &cfg, &mut a) }, NsmcStatus::InvalidArgument);
    unsafe { nsmc_model_free(m) };
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nsmc.h")).unwrap();
    for f in [
        "nsmc_last_error",
        "nsmc_model_new",
        "nsmc_model_free",
        "nsmc_model_describe",
        "nsmc_train_config_default",
        "nsmc_train",
        "nsmc_artifact_load",
        "nsmc_artifact_save",
        "nsmc_artifact_free",
        "nsmc_infer",
        "NSMC_STATUS_DEGENERATE_WEIGHTS",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
