//! Command pipelines behind the `fsistab` binary. Every command writes its
//! artifacts and a reproducibility manifest into the output directory.

use crate::config::{ModelKind, RunConfig};
use crate::delay_control::{export_kernel, synthesize, FeedbackLaw};
use crate::discretization::{assemble_plate_ops, DiscreteSystem, LinearControlSystem, MatrixSystem};
use crate::error::{FsiError, Result};
use crate::numerics::fmt_f64;
use crate::simulation::{decay_fit, integrate, nonlinear_forcing, DecayFit, SimOptions, Trajectory};
use crate::spectral_analysis::{compute_spectrum, hautus_test, HautusReport, Spectrum};
use crate::verification::{report_text, run_suite, CriterionReport};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// The system a command operates on.
pub enum Model {
    Galerkin(Box<DiscreteSystem>),
    Matrix(MatrixSystem),
}

impl Model {
    pub fn system(&self) -> &dyn LinearControlSystem {
        match self {
            Model::Galerkin(s) => s.as_ref(),
            Model::Matrix(m) => m,
        }
    }

    pub fn galerkin(&self) -> Option<&DiscreteSystem> {
        match self {
            Model::Galerkin(s) => Some(s),
            Model::Matrix(_) => None,
        }
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Ok(match cfg.model {
        ModelKind::Galerkin => Model::Galerkin(Box::new(DiscreteSystem::build(&cfg.system_spec())?)),
        ModelKind::Plate => {
            let kmax = cfg.n_modes / 2 - 1;
            let ops = assemble_plate_ops(cfg.physics.alpha, cfg.physics.delta, cfg.length, kmax);
            Model::Matrix(MatrixSystem::new(ops.generator(), DMatrix::zeros(4 * kmax, 1)))
        }
        ModelKind::Scalar => Model::Matrix(MatrixSystem::new(
            DMatrix::from_element(1, 1, cfg.toy_a),
            DMatrix::from_element(1, 1, cfg.toy_b),
        )),
    })
}

/// Seeded initial state of norm `radius`: a random mix of the real and imaginary
/// parts of the rightmost eigenvectors, which keeps the data smooth.
pub fn initial_state(spectrum: &Spectrum, modes: usize, radius: f64, seed: u64) -> DVector<f64> {
    let n = spectrum.pairs.first().map(|p| p.right.len()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DVector::zeros(n);
    for p in spectrum.pairs.iter().take(modes.max(1)) {
        let (a, b): (f64, f64) = (rng.random_range(0.5..1.0), rng.random_range(-1.0..1.0));
        w += p.right.map(|z| z.re) * a + p.right.map(|z| z.im) * b;
    }
    let norm = w.norm();
    if norm > 0.0 {
        w * (radius / norm)
    } else {
        w
    }
}

#[derive(Serialize)]
struct OutputFile {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: String,
    outputs: Vec<OutputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<serde_json::Value>,
}

/// Collects written files for the manifest.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.files.push(OutputFile { name: name.into(), sha256: hex::encode(Sha256::digest(contents.as_bytes())) });
        Ok(())
    }

    pub fn finish(self, command: &str, cfg: &RunConfig, summary: Option<serde_json::Value>) -> Result<()> {
        let m = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.to_text(),
            outputs: self.files,
            summary,
        };
        std::fs::write(self.dir.join(format!("{command}_manifest.json")), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

pub fn cmd_spectrum(cfg: &RunConfig, out: &Path) -> Result<Spectrum> {
    let model = build_model(cfg)?;
    let spec = compute_spectrum(model.system(), cfg.count, cfg.shift)?;
    let mut o = Outputs::new(out)?;
    o.write("spectrum.csv", &spec.to_csv())?;
    let summary = serde_json::to_value(spec.summary())?;
    o.write("spectrum.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    o.finish("spectrum", cfg, None)?;
    Ok(spec)
}

fn hautus_of(cfg: &RunConfig, model: &Model) -> Result<(Spectrum, HautusReport)> {
    let spec = compute_spectrum(model.system(), cfg.count, cfg.shift)?;
    let rep = hautus_test(model.system(), &spec, cfg.gamma, cfg.tol_rel)?;
    Ok((spec, rep))
}

pub fn cmd_hautus(cfg: &RunConfig, out: &Path) -> Result<HautusReport> {
    let model = build_model(cfg)?;
    let (_, rep) = hautus_of(cfg, &model)?;
    let mut o = Outputs::new(out)?;
    o.write("hautus.csv", &rep.to_csv())?;
    let summary = serde_json::json!({
        "sigma": rep.sigma,
        "tol_rel": rep.tol_rel,
        "min_ratio": rep.min_ratio,
        "complete": rep.complete,
        "passed": rep.passed,
        "modes": rep.modes.len(),
    });
    o.write("hautus.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    o.finish("hautus", cfg, Some(summary))?;
    if !rep.passed {
        return Err(FsiError::Criterion(format!(
            "Hautus test failed at sigma={} (min ratio {}, complete={})",
            fmt_f64(rep.sigma),
            fmt_f64(rep.min_ratio),
            rep.complete
        )));
    }
    Ok(rep)
}

fn law_of(cfg: &RunConfig, model: &Model, spec: &Spectrum) -> Result<FeedbackLaw> {
    synthesize(model.system(), spec, cfg.gamma, cfg.t0, cfg.margin(), cfg.tol_rel)
}

pub fn cmd_synthesize(cfg: &RunConfig, out: &Path) -> Result<FeedbackLaw> {
    let model = build_model(cfg)?;
    let spec = compute_spectrum(model.system(), cfg.count, cfg.shift)?;
    let law = law_of(cfg, &model, &spec)?;
    let mut o = Outputs::new(out)?;
    o.write("law.json", &(law.to_json()? + "\n"))?;
    if law.n_gamma > 0 && cfg.t0 > 0.0 {
        let dt = (cfg.t0 / (cfg.t0 / cfg.dt).round().max(4.0)).min(cfg.dt);
        o.write("kernel.json", &(export_kernel(&law, dt, cfg.t_end.max(cfg.t0))?.to_json()? + "\n"))?;
    }
    let cl: Vec<[f64; 2]> = law.closed_loop_eigenvalues()?.iter().map(|z| [z.re, z.im]).collect();
    let summary = serde_json::json!({
        "n_gamma": law.n_gamma,
        "gamma": law.gamma,
        "margin": law.margin,
        "t0": law.t0,
        "open_loop": law.values.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "closed_loop": cl,
    });
    o.finish("synthesize", cfg, Some(summary))?;
    Ok(law)
}

/// Result of a simulation command.
pub struct SimulationRun {
    pub trajectory: Trajectory,
    pub fit: Option<DecayFit>,
    pub abscissa: f64,
    pub law: Option<FeedbackLaw>,
}

/// Integrates `model` from `w0` with the time-stepping settings of `cfg`; the
/// nonlinear term is included when `simulation.nonlinear` is set.
pub fn simulate_model(
    cfg: &RunConfig,
    model: &Model,
    law: Option<&FeedbackLaw>,
    w0: &DVector<f64>,
) -> Result<Trajectory> {
    let opts = SimOptions {
        t_end: cfg.t_end,
        dt: cfg.dt,
        form: cfg.form,
        record_every: cfg.record_every,
        picard_tol: cfg.picard_tol,
        picard_max: cfg.picard_max,
        ..SimOptions::default()
    };
    match (cfg.nonlinear, model.galerkin()) {
        (true, Some(g)) => {
            let nl = |w: &DVector<f64>, wt: &DVector<f64>| nonlinear_forcing(g, w, wt);
            integrate(model.system(), law, w0, &opts, None, Some(&nl))
        }
        (true, None) => Err(FsiError::Config("simulation.nonlinear requires model.kind = galerkin".into())),
        (false, _) => integrate(model.system(), law, w0, &opts, None, None),
    }
}

pub fn run_simulation(cfg: &RunConfig, model: &Model) -> Result<SimulationRun> {
    let sys = model.system();
    let spec = compute_spectrum(sys, cfg.count.max(cfg.initial_modes), cfg.shift)?;
    let law = if cfg.feedback && sys.b().ncols() > 0 { Some(law_of(cfg, model, &spec)?) } else { None };
    let w0 = initial_state(&spec, cfg.initial_modes, cfg.radius, cfg.seed);
    let trajectory = simulate_model(cfg, model, law.as_ref(), &w0)?;
    let t_start = match &law {
        Some(l) if l.n_gamma > 0 => l.t0 + 2.0 / l.gamma,
        _ => 2.0 / cfg.gamma,
    };
    let fit = decay_fit(&trajectory.times, &trajectory.norms, t_start).ok();
    Ok(SimulationRun { trajectory, fit, abscissa: spec.abscissa(), law })
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<SimulationRun> {
    let model = build_model(cfg)?;
    let run = run_simulation(cfg, &model)?;
    let mut o = Outputs::new(out)?;
    o.write("trajectory.csv", &run.trajectory.to_csv())?;
    let summary = serde_json::json!({
        "feedback": run.law.as_ref().map(|l| l.n_gamma),
        "nonlinear": cfg.nonlinear,
        "abscissa": run.abscissa,
        "decay_rate": run.fit.map(|f| f.rate),
        "decay_band": run.fit.map(|f| f.band),
        "max_energy_residual": run.trajectory.max_energy_residual(),
        "final_norm": run.trajectory.norms.last(),
    });
    o.finish("simulate", cfg, Some(summary))?;
    Ok(run)
}

/// Runs the criteria battery; the reports are returned even when some fail.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<Vec<CriterionReport>> {
    let reports = run_suite(cfg, &out.join("determinism"))?;
    let mut o = Outputs::new(out)?;
    o.write("verify.txt", &report_text(&reports))?;
    o.write("verify.json", &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    let passed = reports.iter().filter(|r| r.passed).count();
    o.finish("verify", cfg, Some(serde_json::json!({ "passed": passed, "total": reports.len() })))?;
    Ok(reports)
}
