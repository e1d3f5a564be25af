//! Run configuration: flat `key = value` text with dotted keys and `[section]`
//! headers, or JSON with nested objects. Unknown keys are rejected.

use crate::delay_control::ControlForm;
use crate::discretization::{BodyForce, SystemSpec};
use crate::error::{FsiError, Result};
use crate::numerics::fmt_f64;
use crate::transform_ops::Physics;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Which system the commands operate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// The Galerkin reduction of the coupled fluid–plate operator.
    Galerkin,
    /// The damped plate alone (no fluid, no control).
    Plate,
    /// A scalar toy `z' = a z + b v`.
    Scalar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    pub length: f64,
    pub n_modes: usize,
    pub n_vertical: usize,
    pub physics: Physics,
    pub force: BodyForce,
    pub model: ModelKind,
    pub toy_a: f64,
    pub toy_b: f64,
    pub gamma: f64,
    pub t0: f64,
    /// Pole-placement margin; `None` means `0.2 gamma`.
    pub margin: Option<f64>,
    pub actuator_modes: usize,
    pub tol_rel: f64,
    pub lambda0: Option<f64>,
    pub form: ControlForm,
    pub count: usize,
    pub shift: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Size of the initial perturbation.
    pub radius: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub nonlinear: bool,
    pub feedback: bool,
    pub record_every: usize,
    /// Number of rightmost eigenmodes mixed into the initial state.
    pub initial_modes: usize,
    pub output: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SystemSpec::default();
        Self {
            dim: 2,
            length: spec.length,
            n_modes: spec.n_modes,
            n_vertical: spec.n_vertical,
            physics: spec.physics,
            force: spec.force,
            model: ModelKind::Galerkin,
            toy_a: 1.0,
            toy_b: 1.0,
            gamma: 2.0,
            t0: 0.1,
            margin: None,
            actuator_modes: spec.actuator_modes,
            tol_rel: 1e-6,
            lambda0: None,
            form: ControlForm::Recursion,
            count: 20,
            shift: 0.0,
            t_end: 6.0,
            dt: 0.025,
            radius: 0.01,
            picard_tol: 1e-9,
            picard_max: 25,
            nonlinear: false,
            feedback: true,
            record_every: 1,
            initial_modes: 6,
            output: "out".into(),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| FsiError::Config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(FsiError::Config(format!("invalid value '{v}' for key '{key}' (expected true/false)"))),
    }
}

impl RunConfig {
    /// Loads a config file; JSON if the content starts with `{`, key/value text otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FsiError::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in flatten(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| FsiError::Config(format!("override '{kv}' is not of the form key=value")))?;
        self.set(k.trim(), unquote(v.trim()))?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "geometry.dim" => self.dim = parse(key, v)?,
            "geometry.length" => self.length = parse(key, v)?,
            "geometry.n_modes" => self.n_modes = parse(key, v)?,
            "geometry.n_vertical" => self.n_vertical = parse(key, v)?,
            "physics.nu" => self.physics.nu = parse(key, v)?,
            "physics.alpha" => self.physics.alpha = parse(key, v)?,
            "physics.delta" => self.physics.delta = parse(key, v)?,
            "physics.beta1" => self.physics.beta1 = parse(key, v)?,
            "physics.beta2" => self.physics.beta2 = parse(key, v)?,
            "stationary.force" => {
                self.force = BodyForce::parse(v).map_err(|e| FsiError::Config(format!("key '{key}': {e}")))?
            }
            "model.kind" => {
                self.model = match v {
                    "galerkin" => ModelKind::Galerkin,
                    "plate" => ModelKind::Plate,
                    "scalar" => ModelKind::Scalar,
                    _ => return Err(FsiError::Config(format!("invalid value '{v}' for key '{key}'"))),
                }
            }
            "model.a" => self.toy_a = parse(key, v)?,
            "model.b" => self.toy_b = parse(key, v)?,
            "control.gamma" => self.gamma = parse(key, v)?,
            "control.t0" => self.t0 = parse(key, v)?,
            "control.margin" => self.margin = parse_opt(key, v)?,
            "control.actuator_modes" => self.actuator_modes = parse(key, v)?,
            "control.tol_rel" => self.tol_rel = parse(key, v)?,
            "control.lambda0" => self.lambda0 = parse_opt(key, v)?,
            "control.form" => {
                self.form = match v {
                    "recursion" => ControlForm::Recursion,
                    "kernel" => ControlForm::Kernel,
                    _ => return Err(FsiError::Config(format!("invalid value '{v}' for key '{key}'"))),
                }
            }
            "spectrum.count" => self.count = parse(key, v)?,
            "spectrum.shift" => self.shift = parse(key, v)?,
            "simulation.t_end" => self.t_end = parse(key, v)?,
            "simulation.dt" => self.dt = parse(key, v)?,
            "simulation.radius" => self.radius = parse(key, v)?,
            "simulation.picard_tol" => self.picard_tol = parse(key, v)?,
            "simulation.picard_max" => self.picard_max = parse(key, v)?,
            "simulation.nonlinear" => self.nonlinear = parse_bool(key, v)?,
            "simulation.feedback" => self.feedback = parse_bool(key, v)?,
            "simulation.record_every" => self.record_every = parse(key, v)?,
            "simulation.initial_modes" => self.initial_modes = parse(key, v)?,
            "output.dir" => self.output = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(FsiError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FsiError::Config(m.to_string()));
        if self.dim != 2 {
            return bad("geometry.dim: only dim = 2 is supported by the Galerkin pipeline");
        }
        if !(self.length > 0.0) {
            return bad("geometry.length must be positive");
        }
        if self.n_modes < 4 || !self.n_modes.is_multiple_of(2) {
            return bad("geometry.n_modes must be even and at least 4");
        }
        if self.n_vertical < 4 {
            return bad("geometry.n_vertical must be at least 4");
        }
        let p = &self.physics;
        if !(p.nu > 0.0 && p.alpha > 0.0 && p.delta >= 0.0 && p.beta1 >= 0.0 && p.beta2 >= 0.0) {
            return bad("physics: need nu > 0, alpha > 0, delta >= 0, beta1 >= 0, beta2 >= 0");
        }
        if !(self.gamma > 0.0) {
            return bad("control.gamma must be positive");
        }
        if !(self.t0 >= 0.0) {
            return bad("control.t0 must be non-negative");
        }
        if self.margin.is_some_and(|m| !(m >= 0.0)) {
            return bad("control.margin must be non-negative");
        }
        if self.actuator_modes == 0 {
            return bad("control.actuator_modes must be at least 1");
        }
        if !(self.tol_rel > 0.0) {
            return bad("control.tol_rel must be positive");
        }
        if self.count == 0 {
            return bad("spectrum.count must be positive");
        }
        if !(self.dt > 0.0 && self.t_end >= 0.0) {
            return bad("simulation: dt must be positive and t_end non-negative");
        }
        if !(self.radius >= 0.0 && self.picard_tol > 0.0) || self.picard_max == 0 || self.record_every == 0 {
            return bad("simulation: radius >= 0, picard_tol > 0, picard_max >= 1, record_every >= 1 required");
        }
        Ok(())
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(0.2 * self.gamma)
    }

    pub fn system_spec(&self) -> SystemSpec {
        SystemSpec {
            length: self.length,
            n_modes: self.n_modes,
            n_vertical: self.n_vertical,
            physics: self.physics,
            force: self.force.clone(),
            lambda0: self.lambda0,
            actuator_modes: self.actuator_modes,
        }
    }

    /// Canonical `key = value` listing; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "none".into());
        let model = match self.model {
            ModelKind::Galerkin => "galerkin",
            ModelKind::Plate => "plate",
            ModelKind::Scalar => "scalar",
        };
        let form = match self.form {
            ControlForm::Recursion => "recursion",
            ControlForm::Kernel => "kernel",
        };
        let p = &self.physics;
        let lines = [
            ("geometry.dim", self.dim.to_string()),
            ("geometry.length", fmt_f64(self.length)),
            ("geometry.n_modes", self.n_modes.to_string()),
            ("geometry.n_vertical", self.n_vertical.to_string()),
            ("physics.nu", fmt_f64(p.nu)),
            ("physics.alpha", fmt_f64(p.alpha)),
            ("physics.delta", fmt_f64(p.delta)),
            ("physics.beta1", fmt_f64(p.beta1)),
            ("physics.beta2", fmt_f64(p.beta2)),
            ("stationary.force", self.force.descriptor()),
            ("model.kind", model.into()),
            ("model.a", fmt_f64(self.toy_a)),
            ("model.b", fmt_f64(self.toy_b)),
            ("control.gamma", fmt_f64(self.gamma)),
            ("control.t0", fmt_f64(self.t0)),
            ("control.margin", opt(self.margin)),
            ("control.actuator_modes", self.actuator_modes.to_string()),
            ("control.tol_rel", fmt_f64(self.tol_rel)),
            ("control.lambda0", opt(self.lambda0)),
            ("control.form", form.into()),
            ("spectrum.count", self.count.to_string()),
            ("spectrum.shift", fmt_f64(self.shift)),
            ("simulation.t_end", fmt_f64(self.t_end)),
            ("simulation.dt", fmt_f64(self.dt)),
            ("simulation.radius", fmt_f64(self.radius)),
            ("simulation.picard_tol", fmt_f64(self.picard_tol)),
            ("simulation.picard_max", self.picard_max.to_string()),
            ("simulation.nonlinear", self.nonlinear.to_string()),
            ("simulation.feedback", self.feedback.to_string()),
            ("simulation.record_every", self.record_every.to_string()),
            ("simulation.initial_modes", self.initial_modes.to_string()),
            ("output.dir", self.output.clone()),
            ("seed", self.seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical listing.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Flattens either format into `(dotted key, value)` pairs in file order.
fn flatten(text: &str) -> Result<Vec<(String, String)>> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| FsiError::Config(format!("invalid JSON config: {e}")))?;
        let mut out = Vec::new();
        flatten_json("", &v, &mut out)?;
        return Ok(out);
    }
    let mut out = Vec::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FsiError::Config(format!("line {}: expected 'key = value', got '{line}'", no + 1)))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        out.push((key, unquote(v.trim()).to_string()));
    }
    Ok(out)
}

fn flatten_json(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, x, out)?;
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::Null => out.push((prefix.to_string(), "none".into())),
        Value::Array(_) => return Err(FsiError::Config(format!("key '{prefix}': arrays are not supported"))),
    }
    Ok(())
}
