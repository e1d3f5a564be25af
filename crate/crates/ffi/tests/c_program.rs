//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fsistab.h"

int main(void) {
    FsistabConfig *cfg = NULL;
    FsistabModel *model = NULL;
    FsistabLaw *law = NULL;
    FsistabTrajectory *traj = NULL;
    if (fsistab_config_default(&cfg) != FSISTAB_STATUS_OK) return 1;
    if (fsistab_config_set(cfg, "model.kind=scalar") != FSISTAB_STATUS_OK) return 2;
    if (fsistab_config_set(cfg, "no.such.key=1") != FSISTAB_STATUS_CONFIG) return 3;
    char msg[128];
    fsistab_last_error(msg, sizeof msg);
    if (strstr(msg, "no.such.key") == NULL) return 4;
    if (fsistab_model_build(cfg, &model) != FSISTAB_STATUS_OK) return 5;
    if (fsistab_synthesize(model, cfg, &law) != FSISTAB_STATUS_OK) return 6;
    if (fsistab_simulate(model, law, cfg, &traj) != FSISTAB_STATUS_OK) return 7;
    double rate = 0.0;
    if (fsistab_trajectory_decay_rate(traj, 1.0, &rate) != FSISTAB_STATUS_OK) return 8;
    printf("version %s rate %.6f samples %zu\n", fsistab_version(), rate, fsistab_trajectory_len(traj));
    fsistab_trajectory_free(traj);
    fsistab_law_free(law);
    fsistab_model_free(model);
    fsistab_config_free(cfg);
    return rate > 2.0 ? 0 : 9;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps; the static library sits one level up
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libfsistab_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.starts_with(&format!("version {}", env!("CARGO_PKG_VERSION"))));
}
