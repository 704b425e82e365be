use std::ffi::{CStr, CString};
use std::ptr;

use cfl_ffi::*;

const SMALL: &str = r#"{
    "scenario": {"clients": 40, "clusters": 2, "mean_degree": 12, "require_connected": true, "seed": 3},
    "training": {"dim": 4, "test_samples": 50}
}"#;

fn last_error() -> String {
    let p = cfl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_sim(json: &str) -> (CflStatus, *mut CflSimulation) {
    let c = CString::new(json).unwrap();
    let mut sim = ptr::null_mut();
    let s = unsafe { cfl_sim_new_from_json(c.as_ptr(), &mut sim) };
    (s, sim)
}

#[test]
fn status_codes_are_stable() {
    assert_eq!(CflStatus::Ok as i32, 0);
    assert_eq!(CflStatus::NullPointer as i32, 1);
    assert_eq!(CflStatus::Config as i32, 2);
    assert_eq!(CflStatus::Infeasible as i32, 3);
    assert_eq!(CflStatus::Domain as i32, 4);
    assert_eq!(CflStatus::Crypto as i32, 5);
    assert_eq!(CflStatus::Panic as i32, 6);
}

#[test]
fn simulation_lifecycle() {
    let (s, sim) = new_sim(SMALL);
    assert_eq!(s, CflStatus::Ok, "{}", last_error());
    assert!(cfl_last_error_message().is_null());

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cfl_report_json(sim, &mut out) }, CflStatus::Domain);

    for _ in 0..3 {
        assert_eq!(unsafe { cfl_sim_run_round(sim) }, CflStatus::Ok, "{}", last_error());
    }
    let mut round = 0u64;
    assert_eq!(unsafe { cfl_sim_round(sim, &mut round) }, CflStatus::Ok);
    assert_eq!(round, 3);

    assert_eq!(unsafe { cfl_report_json(sim, &mut out) }, CflStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { cfl_string_free(out) };
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["round"], 2);

    let mut len = 0usize;
    assert_eq!(unsafe { cfl_sim_global_model(sim, ptr::null_mut(), 0, &mut len) }, CflStatus::Domain);
    assert_eq!(len, 4);
    let mut w = vec![0.0f64; len];
    assert_eq!(unsafe { cfl_sim_global_model(sim, w.as_mut_ptr(), w.len(), &mut len) }, CflStatus::Ok);
    let global: Vec<f64> = report["global"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(w, global);
    assert!(w.iter().any(|x| *x != 0.0));
    unsafe { cfl_sim_free(sim) };
}

#[test]
fn bad_config_reports_config_error() {
    let (s, sim) = new_sim(r#"{"scenario": {"clusters": 0}}"#);
    assert_eq!(s, CflStatus::Config);
    assert!(sim.is_null());
    assert!(last_error().contains("clusters"));
    let (s, _) = new_sim("{ not json");
    assert_eq!(s, CflStatus::Config);
}

#[test]
fn leaderless_cluster_is_infeasible() {
    let (s, sim) = new_sim(r#"{"scenario": {"clients": 30, "clusters": 3, "range": 0.0, "server_links": {"explicit": []}}}"#);
    assert_eq!(s, CflStatus::Infeasible, "{}", last_error());
    assert!(sim.is_null());
}

#[test]
fn null_arguments_rejected() {
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { cfl_sim_new_from_json(ptr::null(), &mut sim) }, CflStatus::NullPointer);
    assert_eq!(unsafe { cfl_sim_run_round(ptr::null_mut()) }, CflStatus::NullPointer);
    assert_eq!(unsafe { cfl_ring_size(10, 0.9, ptr::null_mut()) }, CflStatus::NullPointer);
    unsafe {
        cfl_sim_free(ptr::null_mut());
        cfl_string_free(ptr::null_mut());
    }
}

#[test]
fn ring_size_and_edge_probability() {
    let mut m = 0usize;
    assert_eq!(unsafe { cfl_ring_size(100, 0.99, &mut m) }, CflStatus::Ok);
    // ceil(ln 100 - ln(-ln 0.99)) = ceil(4.6052 + 4.6002)
    assert_eq!(m, 10);
    let mut r = 0.0;
    assert_eq!(unsafe { cfl_edge_probability(100, 0.99, &mut r) }, CflStatus::Ok);
    let expect = ((100f64).ln() - (-(0.99f64).ln()).ln()) / 100.0;
    assert!((r - expect).abs() < 1e-15);
    assert_eq!(unsafe { cfl_ring_size(1, 0.99, &mut m) }, CflStatus::Domain);
    assert_eq!(unsafe { cfl_edge_probability(50, 1.0, &mut r) }, CflStatus::Domain);
}

#[test]
fn envelope_round_trip_and_tamper() {
    let mut key = [0u8; 16];
    assert_eq!(unsafe { cfl_ae_keygen(128, 9, key.as_mut_ptr()) }, CflStatus::Ok);
    assert_eq!(unsafe { cfl_ae_keygen(256, 9, key.as_mut_ptr()) }, CflStatus::Crypto);

    let msg = b"partial aggregate";
    let mut env = ptr::null_mut();
    let s = unsafe { cfl_ae_seal(key.as_ptr(), msg.as_ptr(), msg.len(), 4, 2, 1, 7, 3, &mut env) };
    assert_eq!(s, CflStatus::Ok);
    let json = unsafe { CStr::from_ptr(env) }.to_owned();
    unsafe { cfl_string_free(env) };

    let mut buf = [0u8; 64];
    let mut n = 0usize;
    let s = unsafe { cfl_ae_open(key.as_ptr(), json.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(s, CflStatus::Ok);
    assert_eq!(&buf[..n], msg);

    let mut v: serde_json::Value = serde_json::from_str(json.to_str().unwrap()).unwrap();
    let first = v["ciphertext"][0].as_u64().unwrap();
    v["ciphertext"][0] = (first ^ 1).into();
    let forged = CString::new(v.to_string()).unwrap();
    let s = unsafe { cfl_ae_open(key.as_ptr(), forged.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(s, CflStatus::Crypto);

    let mut other = key;
    other[0] ^= 0x80;
    let s = unsafe { cfl_ae_open(other.as_ptr(), json.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(s, CflStatus::Crypto);
}
