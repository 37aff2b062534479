use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ficabu_core::nn::{save_model, Model};
use ficabu_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_file(dir: &Path) -> (PathBuf, Model) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::mlp(&[6, 8, 3], &mut rng).unwrap();
    let path = dir.join("m.fcbm");
    save_model(&m, &path).unwrap();
    (path, m)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { ficabu_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn samples(count: usize, len: usize) -> (Vec<f32>, Vec<usize>) {
    let x = (0..count * len).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect();
    let y = (0..count).map(|i| i % 3).collect();
    (x, y)
}

#[test]
fn model_roundtrip_and_queries() {
    let dir = tempfile::tempdir().unwrap();
    let (path, m) = model_file(dir.path());
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(ficabu_model_load(cstr(&path).as_ptr(), &mut h), FicabuStatus::Ok);
        let (mut depth, mut count, mut len) = (0, 0, 0);
        assert_eq!(ficabu_model_depth(h, &mut depth), FicabuStatus::Ok);
        assert_eq!(ficabu_model_param_count(h, &mut count), FicabuStatus::Ok);
        assert_eq!(ficabu_model_input_len(h, &mut len), FicabuStatus::Ok);
        assert_eq!((depth, count, len), (2, m.param_count(), 6));

        let copy = dir.path().join("copy.fcbm");
        assert_eq!(ficabu_model_save(h, cstr(&copy).as_ptr()), FicabuStatus::Ok);
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
        ficabu_model_free(h);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fcbm");
    std::fs::write(&bad, b"XXXXjunk").unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(ficabu_model_load(cstr(&bad).as_ptr(), &mut h), FicabuStatus::Format);
        assert!(h.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(ficabu_model_load(ptr::null(), &mut h), FicabuStatus::NullPointer);
        assert!(last_error().contains("NULL"));
        let mut depth = 0;
        assert_eq!(ficabu_model_depth(ptr::null(), &mut depth), FicabuStatus::NullPointer);
        ficabu_model_free(ptr::null_mut());
    }
}

#[test]
fn unlearn_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = model_file(dir.path());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ficabu_model_load(cstr(&path).as_ptr(), &mut m), FicabuStatus::Ok);
        let (x, y) = samples(9, 6);
        let mut g = ptr::null_mut();
        assert_eq!(ficabu_importance_estimate(m, x.as_ptr(), y.as_ptr(), 9, &mut g), FicabuStatus::Ok);
        let imp = dir.path().join("g.fcbi");
        assert_eq!(ficabu_importance_save(g, cstr(&imp).as_ptr()), FicabuStatus::Ok);
        let mut g2 = ptr::null_mut();
        assert_eq!(ficabu_importance_load(cstr(&imp).as_ptr(), m, &mut g2), FicabuStatus::Ok);

        let mut p = std::mem::zeroed();
        assert_eq!(ficabu_unlearn_params_default(&mut p), FicabuStatus::Ok);
        p.mode = FicabuMode::Cau as u32;
        p.tau = 1.0;
        let forget: Vec<usize> = vec![0; 3];
        let mut o = ptr::null_mut();
        assert_eq!(ficabu_unlearn(m, g2, x.as_ptr(), forget.as_ptr(), 3, &p, &mut o), FicabuStatus::Ok);
        let (mut stop, mut early, mut ratio, mut total) = (0, false, 0.0, 0);
        ficabu_outcome_stop_layer(o, &mut stop);
        ficabu_outcome_early_stop(o, &mut early);
        ficabu_outcome_mac_ratio(o, &mut ratio);
        ficabu_outcome_total_macs(o, &mut total);
        assert_eq!(stop, 1);
        assert!(early);
        assert!(ratio > 0.0 && total > 0);

        let mut edited = ptr::null_mut();
        assert_eq!(ficabu_outcome_model(o, &mut edited), FicabuStatus::Ok);
        let mut acc = -1.0;
        assert_eq!(ficabu_model_accuracy(edited, x.as_ptr(), y.as_ptr(), 9, false, &mut acc), FicabuStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));

        let mut needed = 0;
        assert_eq!(ficabu_outcome_report_json(o, ptr::null_mut(), 0, &mut needed), FicabuStatus::BufferTooSmall);
        let mut buf = vec![0u8; needed + 1];
        assert_eq!(
            ficabu_outcome_report_json(o, buf.as_mut_ptr().cast(), buf.len(), &mut needed),
            FicabuStatus::Ok
        );
        let text = std::str::from_utf8(&buf[..needed]).unwrap();
        let v: serde_json::Value = serde_json::from_str(text).unwrap();
        assert_eq!(v["stop_layer"], 1);

        p.mode = 9;
        let mut o2 = ptr::null_mut();
        assert_eq!(ficabu_unlearn(m, g2, x.as_ptr(), forget.as_ptr(), 3, &p, &mut o2), FicabuStatus::InvalidArgument);

        ficabu_model_free(edited);
        ficabu_outcome_free(o);
        ficabu_importance_free(g);
        ficabu_importance_free(g2);
        ficabu_model_free(m);
    }
}

#[test]
fn scalar_helpers() {
    unsafe {
        let mut v = 0.0;
        assert_eq!(ficabu_profile_scale(1, 10.0, 3.0, 5, &mut v), FicabuStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(ficabu_profile_scale(5, 10.0, 3.0, 5, &mut v), FicabuStatus::Ok);
        assert_eq!(v, 10.0);
        assert_eq!(ficabu_profile_scale(1, 10.0, 3.0, 1, &mut v), FicabuStatus::DegenerateDepth);
        assert_eq!(ficabu_rpr(0.19, 0.16, &mut v), FicabuStatus::Ok);
        assert_eq!(format!("{v:.2}"), "15.79");
        assert_eq!(ficabu_rpr(0.0, 0.1, &mut v), FicabuStatus::NotApplicable);
        assert_eq!(ficabu_speedup_vs_core(4096, FicabuIpKind::Fimd as u32, &mut v), FicabuStatus::Ok);
        assert!((v - 11.7).abs() < 0.5);
        assert_eq!(ficabu_speedup_vs_core(4096, 7, &mut v), FicabuStatus::InvalidArgument);
        let ver = std::ffi::CStr::from_ptr(ficabu_version());
        assert_eq!(ver.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ficabu.h")).unwrap();
    for name in [
        "ficabu_model_load",
        "ficabu_unlearn",
        "ficabu_outcome_report_json",
        "ficabu_last_error_message",
        "FICABU_STATUS_OK",
        "typedef struct FicabuModel FicabuModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libficabu_ffi.a");
    lib.exists().then_some(lib)
}

/// Builds the C smoke program against the header and static library when a
/// C compiler is present.
#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not found; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let (model, _) = model_file(dir.path());
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("depth 2 stop 2"));
}
