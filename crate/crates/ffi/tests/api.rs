use fsistab_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { fsistab_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn config(overrides: &[&str]) -> *mut FsistabConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(fsistab_config_default(&mut cfg), FsistabStatus::Ok);
        for kv in overrides {
            let kv = CString::new(*kv).unwrap();
            assert_eq!(fsistab_config_set(cfg, kv.as_ptr()), FsistabStatus::Ok, "{}", last_error());
        }
    }
    cfg
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fsistab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn scalar_toy_pipeline() {
    let cfg = config(&["model.kind=scalar", "simulation.t_end=8", "simulation.dt=0.01", "simulation.radius=1"]);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(fsistab_model_build(cfg, &mut model), FsistabStatus::Ok);
        assert_eq!(fsistab_model_dim(model), 1);
        let (mut re, mut im, mut len) = ([0.0; 4], [0.0; 4], 0usize);
        assert_eq!(fsistab_model_eigenvalues(model, re.as_mut_ptr(), im.as_mut_ptr(), 4, &mut len), FsistabStatus::Ok);
        assert_eq!((len, re[0], im[0]), (1, 1.0, 0.0));

        let (mut ratio, mut passed) = (0.0, false);
        assert_eq!(fsistab_hautus(model, cfg, &mut ratio, &mut passed), FsistabStatus::Ok);
        assert!(passed && ratio > 0.5);

        let mut law = ptr::null_mut();
        assert_eq!(fsistab_synthesize(model, cfg, &mut law), FsistabStatus::Ok);
        assert_eq!(fsistab_law_modes(law), 1);
        assert_eq!(fsistab_law_closed_loop(law, re.as_mut_ptr(), im.as_mut_ptr(), 4, &mut len), FsistabStatus::Ok);
        assert!((re[0] + 2.4).abs() < 1e-12);

        let mut n = 0usize;
        assert_eq!(fsistab_law_to_json(law, ptr::null_mut(), 0, &mut n), FsistabStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; n + 1];
        assert_eq!(fsistab_law_to_json(law, buf.as_mut_ptr(), buf.len(), &mut n), FsistabStatus::Ok);
        let json = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(fsistab::delay_control::FeedbackLaw::from_json(json).is_ok());

        let mut traj = ptr::null_mut();
        assert_eq!(fsistab_simulate(model, law, cfg, &mut traj), FsistabStatus::Ok);
        let samples = fsistab_trajectory_len(traj);
        assert_eq!(samples, 801);
        let (mut t, mut w) = (vec![0.0; samples], vec![0.0; samples]);
        assert_eq!(fsistab_trajectory_norms(traj, t.as_mut_ptr(), w.as_mut_ptr(), samples, &mut n), FsistabStatus::Ok);
        assert!(t[0] == 0.0 && (w[0] - 1.0).abs() < 1e-15);
        let mut rate = 0.0;
        assert_eq!(fsistab_trajectory_decay_rate(traj, 2.0, &mut rate), FsistabStatus::Ok);
        assert!((rate - 2.4).abs() < 0.05, "{rate}");

        fsistab_trajectory_free(traj);
        fsistab_law_free(law);
        fsistab_model_free(model);
        fsistab_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes_with_messages() {
    unsafe {
        let cfg = config(&[]);
        let kv = CString::new("control.gama=2").unwrap();
        assert_eq!(fsistab_config_set(cfg, kv.as_ptr()), FsistabStatus::Config);
        assert!(last_error().contains("control.gama"));

        let bad = config(&["model.kind=scalar", "model.b=0"]);
        let mut model = ptr::null_mut();
        assert_eq!(fsistab_model_build(bad, &mut model), FsistabStatus::Ok);
        let mut law = ptr::null_mut();
        assert_eq!(fsistab_synthesize(model, bad, &mut law), FsistabStatus::Criterion);
        assert!(law.is_null());
        assert!(last_error().contains("criterion failed"));

        let mut re = [0.0; 1];
        let mut len = 0;
        let status = fsistab_model_eigenvalues(ptr::null(), re.as_mut_ptr(), re.as_mut_ptr(), 1, &mut len);
        assert_eq!(status, FsistabStatus::NullPointer);
        let nonlinear = config(&["model.kind=scalar", "simulation.nonlinear=true"]);
        let mut traj = ptr::null_mut();
        assert_eq!(fsistab_simulate(model, ptr::null(), nonlinear, &mut traj), FsistabStatus::Config);

        let missing = CString::new("/nonexistent/run.cfg").unwrap();
        let mut loaded = ptr::null_mut();
        assert_eq!(fsistab_config_load(missing.as_ptr(), &mut loaded), FsistabStatus::Config);

        fsistab_model_free(model);
        fsistab_config_free(nonlinear);
        fsistab_config_free(bad);
        fsistab_config_free(cfg);
        fsistab_config_free(ptr::null_mut());
    }
}

#[test]
fn run_command_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&["model.kind=plate"]);
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cmd = CString::new("spectrum").unwrap();
    unsafe {
        assert_eq!(fsistab_run_command(cfg, cmd.as_ptr(), out.as_ptr()), FsistabStatus::Ok);
        let unknown = CString::new("plot").unwrap();
        assert_eq!(fsistab_run_command(cfg, unknown.as_ptr(), out.as_ptr()), FsistabStatus::Config);
        fsistab_config_free(cfg);
    }
    assert!(dir.path().join("spectrum.csv").exists());
    assert!(dir.path().join("spectrum_manifest.json").exists());
}
