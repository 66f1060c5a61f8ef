use std::ffi::{CStr, CString};
use std::ptr;

use flowmimic_ffi::*;

fn last_error() -> String {
    let p = fm_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(fm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn synthetic_flows_round_trip_through_handles() {
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { fm_flows_synth(FmAttack::BurstFlood, 5, 3, &mut set) }, FmStatus::Ok);
    assert!(fm_last_error().is_null());
    assert_eq!(unsafe { fm_flows_len(set) }, 5);
    let mut rate = 0.0;
    assert_eq!(unsafe { fm_flow_rate(set, 4, &mut rate) }, FmStatus::Ok);
    assert!(rate > 0.0);
    assert_eq!(unsafe { fm_flow_rate(set, 5, &mut rate) }, FmStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    unsafe { fm_flows_free(set) };
    unsafe { fm_flows_free(ptr::null_mut()) };
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(unsafe { fm_flows_load_csv(ptr::null(), ptr::null_mut()) }, FmStatus::NullPointer);
    assert!(last_error().contains("path"));
    let path = CString::new("/definitely/not/here.csv").unwrap();
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { fm_flows_load_csv(path.as_ptr(), &mut set) }, FmStatus::Io);
    assert!(set.is_null());
    assert_eq!(unsafe { fm_flows_len(ptr::null()) }, 0);
}

#[test]
fn kl_matches_direct_sum() {
    let p = [0.5, 0.5, 0.0];
    let q = [0.25, 0.25, 0.5];
    let mut out = f64::NAN;
    assert_eq!(unsafe { fm_kl_divergence(p.as_ptr(), q.as_ptr(), 3, 0.0, &mut out) }, FmStatus::Ok);
    let direct: f64 = 2.0 * 0.5 * (0.5f64 / 0.25).ln();
    assert!((out - direct).abs() < 1e-12, "{out} vs {direct}");
}

#[test]
fn config_errors_map_to_config_status() {
    let bad = CString::new(r#"{"env": {"tau": 0}}"#).unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { fm_run_open(bad.as_ptr(), ptr::null(), &mut run) }, FmStatus::Config);
    assert!(run.is_null());
    let unknown = CString::new(r#"{"nonsense": true}"#).unwrap();
    assert_eq!(unsafe { fm_run_open(unknown.as_ptr(), ptr::null(), &mut run) }, FmStatus::Config);
}

#[test]
fn stages_run_through_a_run_handle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(
        r#"{"data": {"benign": 300, "burst_flood": 60, "beacon": 60}, "pretrain": {"steps": 2},
            "scenarios": [{"attack": "burst_flood", "detector": "threshold"}]}"#,
    )
    .unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { fm_run_open(cfg.as_ptr(), out.as_ptr(), &mut run) }, FmStatus::Ok);
    for stage in ["gen-data", "build-vocab", "train-detector"] {
        let s = CString::new(stage).unwrap();
        assert_eq!(unsafe { fm_run_stage(run, s.as_ptr()) }, FmStatus::Ok, "{stage}");
    }
    let nope = CString::new("launch").unwrap();
    assert_eq!(unsafe { fm_run_stage(run, nope.as_ptr()) }, FmStatus::InvalidArgument);
    let eval = CString::new("eval").unwrap();
    assert_eq!(unsafe { fm_run_stage(run, eval.as_ptr()) }, FmStatus::InvalidArgument);
    assert!(last_error().contains("eval"));

    let det_dir = CString::new(dir.path().join("detectors/threshold").to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { fm_detector_load(det_dir.as_ptr(), &mut det) }, FmStatus::Ok);
    let csv = CString::new(dir.path().join("data/burst_flood_attack_test.csv").to_str().unwrap()).unwrap();
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { fm_flows_load_csv(csv.as_ptr(), &mut set) }, FmStatus::Ok);
    let mut flagged = 0;
    let n = unsafe { fm_flows_len(set) };
    let mut total = 0;
    for i in 0..n {
        assert_eq!(unsafe { fm_detector_flags(det, set, i, &mut flagged) }, FmStatus::Ok);
        total += flagged;
    }
    assert!(total as usize * 10 >= n * 9, "{total} of {n} flagged");
    unsafe {
        fm_flows_free(set);
        fm_detector_free(det);
        fm_run_free(run);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flowmimic.h")).unwrap();
    for name in [
        "fm_last_error",
        "fm_version",
        "fm_flows_load_csv",
        "fm_flows_synth",
        "fm_flows_free",
        "fm_detector_load",
        "fm_detector_flags",
        "fm_kl_divergence",
        "fm_run_open",
        "fm_run_stage",
        "fm_run_free",
        "FM_STATUS_OK",
        "typedef struct FmRun FmRun",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
