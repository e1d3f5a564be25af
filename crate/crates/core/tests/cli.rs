use fsistab::spectral_analysis::plate_quadratic_roots;
use num_complex::Complex64;
use std::path::Path;
use std::process::{Command, Output};

fn fsistab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsistab")).args(args).arg("--out").arg(out).output().unwrap()
}

fn eigenvalues(csv: &str) -> Vec<Complex64> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("re,im,residual,left_residual"));
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            Complex64::new(f[0], f[1])
        })
        .collect()
}

fn manifest(dir: &Path, cmd: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{cmd}_manifest.json"))).unwrap()).unwrap()
}

#[test]
fn spectrum_writes_conjugate_symmetric_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsistab(&["spectrum"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let vals = eigenvalues(&std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap());
    assert!(vals.len() >= 20);
    for z in vals.iter().filter(|z| z.im.abs() > 1e-8) {
        assert!(vals.iter().any(|w| (w - z.conj()).norm() < 1e-8 * z.norm()));
    }
    let m = manifest(dir.path(), "spectrum");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["config"].as_str().unwrap().contains("control.gamma = 2.0"));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsistab(&["spectrum", "--override", "physics.viscosity=1"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("physics.viscosity"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[control]\ndelay = 0.1\n").unwrap();
    let o = fsistab(&["hautus", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("control.delay"));
}

#[test]
fn plate_only_spectrum_matches_quadratic_formula() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsistab(&["spectrum", "--override", "model.kind=plate", "--override", "spectrum.count=28"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let vals = eigenvalues(&std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap());
    let expected = plate_quadratic_roots(1.0, 0.5, 1.0, 7);
    assert_eq!(vals.len(), expected.len());
    for z in &vals {
        assert!(expected.iter().any(|e| (e - z).norm() <= 1e-8 * z.norm().max(1.0)), "{z}");
    }
}

#[test]
fn zero_control_toy_fails_the_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synthesize", "--override", "model.kind=scalar", "--override", "model.b=0"];
    let o = fsistab(&args, dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("criterion failed"));
    let o = fsistab(&["hautus", "--override", "model.kind=scalar", "--override", "model.b=0"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(dir.path().join("hautus.csv").exists());
}

#[test]
fn synthesize_writes_law_and_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsistab(&["synthesize"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let law =
        fsistab::delay_control::FeedbackLaw::from_json(&std::fs::read_to_string(dir.path().join("law.json")).unwrap())
            .unwrap();
    assert_eq!(law.n_gamma, 2);
    assert!(dir.path().join("kernel.json").exists());
    let m = manifest(dir.path(), "synthesize");
    let cl = m["summary"]["closed_loop"].as_array().unwrap();
    assert!(cl.iter().all(|z| z[0].as_f64().unwrap() <= -2.4 + 1e-8));
}

#[test]
fn open_loop_simulation_decays_at_the_spectral_abscissa() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--override", "simulation.feedback=false", "--override", "simulation.t_end=15"];
    let o = fsistab(&args, dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = &manifest(dir.path(), "simulate")["summary"];
    let (rate, abscissa) = (s["decay_rate"].as_f64().unwrap(), s["abscissa"].as_f64().unwrap());
    assert!((rate + abscissa).abs() <= 0.05 * abscissa.abs(), "{rate} vs {abscissa}");
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,norm,fluid,plate_disp,plate_vel,control,energy_residual\n"));
}

#[test]
fn simulation_output_depends_only_on_config_and_seed() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let base = ["simulate", "--override", "simulation.t_end=1"];
    for (d, seed) in dirs.iter().zip(["4", "4", "5"]) {
        let mut args = base.to_vec();
        args.extend(["--seed", seed]);
        assert_eq!(fsistab(&args, d.path()).status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("trajectory.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    assert_ne!(read(&dirs[0]), read(&dirs[2]));
    assert_eq!(manifest(dirs[0].path(), "simulate")["seed"], 4);
}

#[test]
fn oversized_nonlinear_data_is_an_integration_failure() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--override", "simulation.nonlinear=true", "--override", "simulation.radius=50"];
    let o = fsistab(&args, dir.path());
    assert_eq!(o.status.code(), Some(5));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn verify_passes_and_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = fsistab(&["verify"], d.path());
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert_eq!(o.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout.lines().filter(|l| l.contains(" PASS ")).count(), 10);
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() >= 3);
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ca == cb, "{na} differs between runs");
    }
}
