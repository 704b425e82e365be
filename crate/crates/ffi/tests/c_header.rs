//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "cfl.h"

int main(void) {
    size_t m = 0;
    if (cfl_ring_size(500, 0.99, &m) != CFL_STATUS_OK || m != 11) return 1;
    if (cfl_ring_size(0, 0.99, &m) != CFL_STATUS_DOMAIN) return 2;
    if (cfl_last_error_message() == NULL) return 3;

    CflSimulation *sim = NULL;
    const char *cfg = "{\"scenario\":{\"clients\":30,\"clusters\":2,\"mean_degree\":12,"
                      "\"require_connected\":true},\"training\":{\"dim\":3,\"test_samples\":10}}";
    if (cfl_sim_new_from_json(cfg, &sim) != CFL_STATUS_OK) {
        fprintf(stderr, "%s\n", cfl_last_error_message());
        return 4;
    }
    if (cfl_sim_run_round(sim) != CFL_STATUS_OK) return 5;
    char *report = NULL;
    if (cfl_report_json(sim, &report) != CFL_STATUS_OK || strstr(report, "\"round\":0") == NULL) return 6;
    cfl_string_free(report);
    double w[3];
    size_t len = 0;
    if (cfl_sim_global_model(sim, w, 3, &len) != CFL_STATUS_OK || len != 3) return 7;
    cfl_sim_free(sim);
    puts("ok");
    return 0;
}
"#;

/// `target/<profile>` from the test executable at `target/<profile>/deps/…`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/cfl.h");
    assert!(header.exists(), "header not generated");
    let lib = profile_dir().join("libcfl_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("running the C compiler");
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
