use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use regstab_ffi::*;

const LINE: &str = r#"{"system": {"id": "unit_speed_line", "with_cost": true}, "mrf": "abs:2", "p0": 1.0,
  "region": {"by": "distance", "lo": 0.05, "hi": 1.0}}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(regstab_last_error_message()) }.to_string_lossy().into_owned()
}

fn model(json: &str) -> Result<*mut RegstabModel, RegstabStatus> {
    let text = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    match unsafe { regstab_model_from_json(text.as_ptr(), &mut out) } {
        RegstabStatus::Ok => Ok(out),
        s => Err(s),
    }
}

#[test]
fn model_evaluates_and_frees() {
    let m = model(LINE).unwrap();
    unsafe {
        assert_eq!(regstab_model_state_dim(m), 1);
        assert_eq!(regstab_model_p0(m), 1.0);
        let x = [0.25];
        let (mut w, mut d, mut g) = (0.0, 0.0, [0.0]);
        assert_eq!(regstab_model_value(m, x.as_ptr(), 1, &mut w), RegstabStatus::Ok);
        assert_eq!(regstab_model_distance(m, x.as_ptr(), 1, &mut d), RegstabStatus::Ok);
        assert_eq!(regstab_model_gradient(m, x.as_ptr(), 1, g.as_mut_ptr()), RegstabStatus::Ok);
        assert_eq!((w, d, g[0]), (0.5, 0.25, 2.0));
        assert_eq!(last_error(), "");
        regstab_model_free(m);
        regstab_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    assert_eq!(model(&LINE.replace("abs:2", "w9")).unwrap_err(), RegstabStatus::Config);
    assert!(last_error().contains("w9"));
    assert_eq!(model("{").unwrap_err(), RegstabStatus::Config);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { regstab_model_from_json(ptr::null(), &mut out) }, RegstabStatus::NullPointer);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { regstab_model_from_json(bad.as_ptr().cast(), &mut out) }, RegstabStatus::InvalidUtf8);

    let m = model(LINE).unwrap();
    let mut w = 0.0;
    unsafe {
        assert_eq!(regstab_model_value(m, [1.0, 2.0].as_ptr(), 2, &mut w), RegstabStatus::DimensionMismatch);
        assert_eq!(regstab_model_value(m, ptr::null(), 1, &mut w), RegstabStatus::NullPointer);
        assert_eq!(regstab_model_value(ptr::null(), [1.0].as_ptr(), 1, &mut w), RegstabStatus::NullPointer);
        regstab_model_free(m);
    }
}

#[test]
fn run_returns_report_and_exit_code() {
    let cmd = CString::new("certify").unwrap();
    let cfg = CString::new(LINE).unwrap();
    let mut report = ptr::null_mut();
    let mut code = -1;
    let status = unsafe { regstab_run(cmd.as_ptr(), cfg.as_ptr(), ptr::null(), ptr::null(), &mut report, &mut code) };
    assert_eq!(status, RegstabStatus::Ok, "{}", last_error());
    assert_eq!(code, 0);
    let text = unsafe { CStr::from_ptr(report) }.to_str().unwrap().to_owned();
    assert!(text.starts_with("{\n  \"stable\": true"), "{text}");
    unsafe { regstab_string_free(report) };

    let bad = CString::new(LINE.replace("\"p0\": 1.0,", "\"p0\": 1.0, \"r\": 2.0, \"R\": 1.0,")).unwrap();
    let status = unsafe { regstab_run(cmd.as_ptr(), bad.as_ptr(), ptr::null(), ptr::null(), &mut report, &mut code) };
    assert_eq!(status, RegstabStatus::Config);
}

#[test]
fn command_line_entry_point() {
    let args: Vec<CString> = ["regstab", "certify"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let argv: Vec<*const std::ffi::c_char> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { regstab_run_command(argv.len() as i32, argv.as_ptr()) }, 1);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib = target_dir().join("libregstab_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::temp_dir().join(format!("regstab_smoke_{}", std::process::id()));
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
