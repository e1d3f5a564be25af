//! C ABI for the fsistab toolkit.
//!
//! All objects are opaque handles returned through out-pointers and released with
//! the matching `*_free`. Every fallible call returns an
//! [`FsistabStatus`]; the message of the last failure on the calling thread is
//! available through [`fsistab_last_error`].

use fsistab::commands::{
    build_model, cmd_hautus, cmd_simulate, cmd_spectrum, cmd_synthesize, cmd_verify, initial_state, simulate_model,
    Model,
};
use fsistab::config::RunConfig;
use fsistab::delay_control::FeedbackLaw;
use fsistab::simulation::{decay_fit, Trajectory};
use fsistab::spectral_analysis::{compute_spectrum, hautus_test, Spectrum};
use fsistab::FsiError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes; the non-zero values from 2 to 5 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsistabStatus {
    Ok = 0,
    Assembly = 2,
    Config = 3,
    Criterion = 4,
    Integration = 5,
    NullPointer = 10,
    InvalidUtf8 = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Run configuration.
pub struct FsistabConfig {
    cfg: RunConfig,
}

/// Assembled system together with its computed spectrum.
pub struct FsistabModel {
    model: Model,
    spectrum: Spectrum,
}

/// Synthesized delayed feedback law.
pub struct FsistabLaw {
    law: FeedbackLaw,
}

/// Simulated trajectory.
pub struct FsistabTrajectory {
    traj: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &FsiError) -> FsistabStatus {
    match e.exit_code() {
        3 => FsistabStatus::Config,
        4 => FsistabStatus::Criterion,
        5 => FsistabStatus::Integration,
        _ => FsistabStatus::Assembly,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), FsistabStatus>) -> FsistabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FsistabStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            FsistabStatus::Panic
        }
    }
}

fn fail(e: FsiError) -> FsistabStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> FsistabStatus {
    set_error(format!("{what} is null"));
    FsistabStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, FsistabStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, FsistabStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FsistabStatus::InvalidUtf8
    })
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), FsistabStatus> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `vals` into `(re, im)` arrays of capacity `cap`, always reporting the full length.
unsafe fn copy_complex(
    vals: &[num_complex::Complex64],
    re: *mut f64,
    im: *mut f64,
    cap: usize,
    len: *mut usize,
) -> Result<(), FsistabStatus> {
    copy_reals(&vals.iter().map(|z| z.re).collect::<Vec<_>>(), re, cap, len)?;
    copy_reals(&vals.iter().map(|z| z.im).collect::<Vec<_>>(), im, cap, len)
}

unsafe fn copy_reals(vals: &[f64], dst: *mut f64, cap: usize, len: *mut usize) -> Result<(), FsistabStatus> {
    if !len.is_null() {
        *len = vals.len();
    }
    if cap < vals.len() {
        set_error(format!("buffer holds {cap} values, {} needed", vals.len()));
        return Err(FsistabStatus::BufferTooSmall);
    }
    if dst.is_null() {
        return Err(null("output buffer"));
    }
    std::ptr::copy_nonoverlapping(vals.as_ptr(), dst, vals.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fsistab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fsistab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates the default configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsistab_config_default(out: *mut *mut FsistabConfig) -> FsistabStatus {
    guard(|| emit(out, FsistabConfig { cfg: RunConfig::default() }))
}

/// Loads a configuration file (key = value text or JSON).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsistab_config_load(path: *const c_char, out: *mut *mut FsistabConfig) -> FsistabStatus {
    guard(|| {
        let path = string(path, "path")?;
        let cfg = RunConfig::load(Path::new(path)).map_err(fail)?;
        emit(out, FsistabConfig { cfg })
    })
}

/// Applies one `key=value` override.
///
/// # Safety
/// `cfg` must be a live config handle and `kv` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fsistab_config_set(cfg: *mut FsistabConfig, kv: *const c_char) -> FsistabStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let kv = string(kv, "override")?;
        cfg.cfg.apply_override(kv).map_err(fail)
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsistab_config_free(cfg: *mut FsistabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Assembles the system selected by `cfg` and computes its rightmost spectrum.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsistab_model_build(cfg: *const FsistabConfig, out: *mut *mut FsistabModel) -> FsistabStatus {
    guard(|| {
        let c = &borrow(cfg, "config")?.cfg;
        let model = build_model(c).map_err(fail)?;
        let spectrum = compute_spectrum(model.system(), c.count.max(c.initial_modes), c.shift).map_err(fail)?;
        emit(out, FsistabModel { model, spectrum })
    })
}

/// State dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn fsistab_model_dim(model: *const FsistabModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.system().a().nrows())
}

/// Copies the computed eigenvalues (rightmost first). `len` receives the count
/// even when the buffers are too small.
///
/// # Safety
/// `re` and `im` must hold `cap` doubles; `len` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fsistab_model_eigenvalues(
    model: *const FsistabModel,
    re: *mut f64,
    im: *mut f64,
    cap: usize,
    len: *mut usize,
) -> FsistabStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let vals: Vec<_> = m.spectrum.pairs.iter().map(|p| p.value).collect();
        copy_complex(&vals, re, im, cap, len)
    })
}

/// Hautus test at `sigma = gamma` from `cfg`. Writes the minimal ratio
/// `|B* e| / |e|` and whether the test passed; a failed test is not an error.
///
/// # Safety
/// Handles must be live; `min_ratio` and `passed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fsistab_hautus(
    model: *const FsistabModel,
    cfg: *const FsistabConfig,
    min_ratio: *mut f64,
    passed: *mut bool,
) -> FsistabStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let c = &borrow(cfg, "config")?.cfg;
        let rep = hautus_test(m.model.system(), &m.spectrum, c.gamma, c.tol_rel).map_err(fail)?;
        if !min_ratio.is_null() {
            *min_ratio = rep.min_ratio;
        }
        if !passed.is_null() {
            *passed = rep.passed;
        }
        Ok(())
    })
}

/// Synthesizes the delayed feedback law with the control settings of `cfg`.
///
/// # Safety
/// Handles must be live and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsistab_synthesize(
    model: *const FsistabModel,
    cfg: *const FsistabConfig,
    out: *mut *mut FsistabLaw,
) -> FsistabStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let c = &borrow(cfg, "config")?.cfg;
        let law =
            fsistab::delay_control::synthesize(m.model.system(), &m.spectrum, c.gamma, c.t0, c.margin(), c.tol_rel)
                .map_err(fail)?;
        emit(out, FsistabLaw { law })
    })
}

/// Number of modes the law acts on, or 0 for a null handle.
///
/// # Safety
/// `law` must be null or a live law handle.
#[no_mangle]
pub unsafe extern "C" fn fsistab_law_modes(law: *const FsistabLaw) -> usize {
    law.as_ref().map_or(0, |l| l.law.n_gamma)
}

/// Eigenvalues of the reduced closed loop.
///
/// # Safety
/// As for [`fsistab_model_eigenvalues`].
#[no_mangle]
pub unsafe extern "C" fn fsistab_law_closed_loop(
    law: *const FsistabLaw,
    re: *mut f64,
    im: *mut f64,
    cap: usize,
    len: *mut usize,
) -> FsistabStatus {
    guard(|| {
        let l = borrow(law, "law")?;
        let vals = l.law.closed_loop_eigenvalues().map_err(fail)?;
        copy_complex(&vals, re, im, cap, len)
    })
}

/// Serializes the law as JSON into `buf` (NUL-terminated); `len` receives the
/// length without the terminator even when `buf` is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes; `len` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fsistab_law_to_json(
    law: *const FsistabLaw,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> FsistabStatus {
    guard(|| {
        let text = borrow(law, "law")?.law.to_json().map_err(fail)?;
        if !len.is_null() {
            *len = text.len();
        }
        if cap <= text.len() {
            set_error(format!("buffer holds {cap} bytes, {} needed", text.len() + 1));
            return Err(FsistabStatus::BufferTooSmall);
        }
        if buf.is_null() {
            return Err(null("output buffer"));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr().cast(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `law` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsistab_law_free(law: *mut FsistabLaw) {
    if !law.is_null() {
        drop(Box::from_raw(law));
    }
}

/// Simulates from the seeded initial state of `cfg`. `law` may be null for an
/// open-loop run. The nonlinear term is included when `simulation.nonlinear` is set.
///
/// # Safety
/// Handles must be live (or `law` null) and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsistab_simulate(
    model: *const FsistabModel,
    law: *const FsistabLaw,
    cfg: *const FsistabConfig,
    out: *mut *mut FsistabTrajectory,
) -> FsistabStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let c = &borrow(cfg, "config")?.cfg;
        let law = law.as_ref().map(|l| &l.law);
        let w0 = initial_state(&m.spectrum, c.initial_modes, c.radius, c.seed);
        let traj = simulate_model(c, &m.model, law, &w0).map_err(fail)?;
        emit(out, FsistabTrajectory { traj })
    })
}

/// Number of recorded samples, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn fsistab_trajectory_len(traj: *const FsistabTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.traj.times.len())
}

/// Copies sample times and state norms.
///
/// # Safety
/// `times` and `norms` must hold `cap` doubles; `len` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fsistab_trajectory_norms(
    traj: *const FsistabTrajectory,
    times: *mut f64,
    norms: *mut f64,
    cap: usize,
    len: *mut usize,
) -> FsistabStatus {
    guard(|| {
        let t = &borrow(traj, "trajectory")?.traj;
        copy_reals(&t.times, times, cap, len)?;
        copy_reals(&t.norms, norms, cap, len)
    })
}

/// Least-squares decay rate of the norm over `[t_start, T]`.
///
/// # Safety
/// `traj` must be a live handle and `rate` writable.
#[no_mangle]
pub unsafe extern "C" fn fsistab_trajectory_decay_rate(
    traj: *const FsistabTrajectory,
    t_start: f64,
    rate: *mut f64,
) -> FsistabStatus {
    guard(|| {
        let t = &borrow(traj, "trajectory")?.traj;
        if rate.is_null() {
            return Err(null("rate"));
        }
        *rate = decay_fit(&t.times, &t.norms, t_start).map_err(fail)?.rate;
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsistab_trajectory_free(traj: *mut FsistabTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsistab_model_free(model: *mut FsistabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs one CLI command (`spectrum`, `hautus`, `synthesize`, `simulate`, `verify`)
/// writing its files into `out_dir`. A failed verification returns `Criterion`.
///
/// # Safety
/// `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fsistab_run_command(
    cfg: *const FsistabConfig,
    command: *const c_char,
    out_dir: *const c_char,
) -> FsistabStatus {
    guard(|| {
        let c = &borrow(cfg, "config")?.cfg;
        let out = Path::new(string(out_dir, "out_dir")?);
        let r = match string(command, "command")? {
            "spectrum" => cmd_spectrum(c, out).map(drop),
            "hautus" => cmd_hautus(c, out).map(drop),
            "synthesize" => cmd_synthesize(c, out).map(drop),
            "simulate" => cmd_simulate(c, out).map(drop),
            "verify" => cmd_verify(c, out).and_then(|reports| {
                let failed = reports.iter().filter(|r| !r.passed).count();
                if failed == 0 {
                    Ok(())
                } else {
                    Err(FsiError::Criterion(format!("{failed} of {} checks failed", reports.len())))
                }
            }),
            other => Err(FsiError::Config(format!("unknown command '{other}'"))),
        };
        r.map_err(fail)
    })
}
