//! Time integration of the Galerkin system: Crank–Nicolson for the linear part,
//! Picard iteration at the midpoint for the quadratic remainder, and the delayed
//! feedback evaluated on the same grid.

use crate::delay_control::{ControlForm, DelayRuntime, FeedbackLaw};
use crate::discretization::{DiscreteSystem, LinearControlSystem};
use crate::error::{FsiError, Result};
use crate::numerics::fmt_f64;
use crate::transform_ops::{convection, remainders, residual_from, Perturbation, VectorField};
use faer::linalg::solvers::Solve;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Exogenous input `u(t)` entering through `B` (boundary data of the actuators).
pub type InputSignal<'a> = &'a dyn Fn(f64) -> DVector<f64>;

/// Projected quadratic remainder `N(W, W_t)` in basis coordinates.
pub type NonlinearTerm<'a> = &'a dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub t_end: f64,
    pub dt: f64,
    pub form: ControlForm,
    /// Store every `record_every`-th step.
    pub record_every: usize,
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Backward-Euler steps taken when the delayed control switches on at `t0`; the jump
    /// excites stiff components that Crank–Nicolson would otherwise leave ringing.
    pub smoothing_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            t_end: 6.0,
            dt: 0.025,
            form: ControlForm::Recursion,
            record_every: 1,
            picard_tol: 1e-9,
            picard_max: 25,
            smoothing_steps: 2,
        }
    }
}

/// Sampled trajectory.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub components: Vec<[f64; 3]>,
    pub control_norms: Vec<f64>,
    /// `E(t) - E(0) - int_0^t (W.AW + W.Bu + W.N) ds` with `E = |W|^2/2`.
    pub energy_residual: Vec<f64>,
    pub picard_iterations: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub final_state: DVector<f64>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,norm,fluid,plate_disp,plate_vel,control,energy_residual\n");
        for i in 0..self.times.len() {
            let c = self.components[i];
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fmt_f64(self.times[i]),
                fmt_f64(self.norms[i]),
                fmt_f64(c[0]),
                fmt_f64(c[1]),
                fmt_f64(c[2]),
                fmt_f64(self.control_norms[i]),
                fmt_f64(self.energy_residual[i])
            ));
        }
        s
    }

    pub fn max_energy_residual(&self) -> f64 {
        self.energy_residual.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Least-squares fit of `log ||W(t)|| ~ c - rate t` over `t >= t_start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    /// Two standard errors of the fitted rate.
    pub band: f64,
    pub samples: usize,
}

pub fn decay_fit(times: &[f64], norms: &[f64], t_start: f64) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        // samples at or below the underflow range carry no slope information
        .filter(|(t, n)| **t >= t_start && **n > 1e-280 && n.is_finite())
        .map(|(t, n)| (*t, n.ln()))
        .collect();
    let m = pts.len();
    if m < 3 {
        return Err(FsiError::Integration(format!("decay fit needs at least 3 samples after t={}", fmt_f64(t_start))));
    }
    let mf = m as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / mf;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / mf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (sse / (mf - 2.0) / sxx).sqrt();
    Ok(DecayFit { rate: -slope, intercept, band: 2.0 * se, samples: m })
}

/// Interpolation order used by [`DelayBuffer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Linear,
    Cubic,
}

/// History of `(t, state, control)` samples spanning at least `span`, queried by interpolation.
#[derive(Clone, Debug)]
pub struct DelayBuffer {
    pub span: f64,
    pub interpolation: Interpolation,
    times: VecDeque<f64>,
    states: VecDeque<DVector<f64>>,
    controls: VecDeque<DVector<f64>>,
}

impl DelayBuffer {
    pub fn new(span: f64, interpolation: Interpolation) -> Self {
        Self { span, interpolation, times: VecDeque::new(), states: VecDeque::new(), controls: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Oldest and newest stored times.
    pub fn window(&self) -> Option<(f64, f64)> {
        Some((*self.times.front()?, *self.times.back()?))
    }

    pub fn push(&mut self, t: f64, state: DVector<f64>, control: DVector<f64>) -> Result<()> {
        if self.times.back().is_some_and(|&last| t <= last) {
            return Err(FsiError::Integration(format!("history times must increase (got t={})", fmt_f64(t))));
        }
        self.times.push_back(t);
        self.states.push_back(state);
        self.controls.push_back(control);
        // keep two samples beyond the span for the cubic stencil
        while self.times.len() > 4 && self.times[2] < t - self.span {
            self.times.pop_front();
            self.states.pop_front();
            self.controls.pop_front();
        }
        Ok(())
    }

    pub fn state_at(&self, t: f64) -> Result<DVector<f64>> {
        self.interpolate(t, &self.states)
    }

    pub fn control_at(&self, t: f64) -> Result<DVector<f64>> {
        self.interpolate(t, &self.controls)
    }

    fn interpolate(&self, t: f64, vals: &VecDeque<DVector<f64>>) -> Result<DVector<f64>> {
        let (lo, hi) = self.window().ok_or_else(|| FsiError::Integration("empty history".into()))?;
        let tol = 1e-12 * hi.abs().max(1.0);
        if t < lo - tol || t > hi + tol {
            return Err(FsiError::Integration(format!(
                "history query t={} outside [{}, {}]",
                fmt_f64(t),
                fmt_f64(lo),
                fmt_f64(hi)
            )));
        }
        let n = self.times.len();
        if n == 1 {
            return Ok(vals[0].clone());
        }
        let i = self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        let stencil: Vec<usize> = match self.interpolation {
            Interpolation::Linear => vec![i, i + 1],
            Interpolation::Cubic => {
                let start = i.saturating_sub(1).min(n.saturating_sub(4));
                (start..(start + 4).min(n)).collect()
            }
        };
        let mut out = DVector::zeros(vals[0].len());
        for &j in &stencil {
            let mut w = 1.0;
            for &k in &stencil {
                if k != j {
                    w *= (t - self.times[k]) / (self.times[j] - self.times[k]);
                }
            }
            out += &vals[j] * w;
        }
        Ok(out)
    }
}

/// Factorizations of `I - theta dt A` for Crank–Nicolson (`theta = 1/2`) and backward Euler.
struct Stepper {
    cn: faer::linalg::solvers::PartialPivLu<f64>,
    be: faer::linalg::solvers::PartialPivLu<f64>,
    n: usize,
}

impl Stepper {
    fn new(a: &DMatrix<f64>, dt: f64) -> Self {
        let n = a.nrows();
        let lu = |theta: f64| {
            let m = DMatrix::identity(n, n) - a * (theta * dt);
            faer::MatRef::from_column_major_slice(m.as_slice(), n, n).partial_piv_lu()
        };
        Self { cn: lu(0.5), be: lu(1.0), n }
    }

    fn solve(&self, rhs: &DVector<f64>, euler: bool) -> DVector<f64> {
        let col = faer::Col::<f64>::from_fn(self.n, |i| rhs[i]);
        let x = if euler { self.be.solve(&col) } else { self.cn.solve(&col) };
        DVector::from_fn(self.n, |i, _| x[i])
    }
}

/// Integrates `W' = A W + B (v + u) + N(W, W')` from `w0`.
///
/// `v` is the delayed feedback of `law` (if any), `u` an open-loop input and `N` an
/// optional projected nonlinearity treated by Picard iteration at the midpoint.
pub fn integrate<S: LinearControlSystem + ?Sized>(
    sys: &S,
    law: Option<&FeedbackLaw>,
    w0: &DVector<f64>,
    opts: &SimOptions,
    input: Option<InputSignal>,
    nonlinear: Option<NonlinearTerm>,
) -> Result<Trajectory> {
    let n = sys.dim();
    if w0.len() != n {
        return Err(FsiError::Integration(format!("initial state has length {}, expected {n}", w0.len())));
    }
    if !(opts.dt > 0.0 && opts.t_end >= 0.0) {
        return Err(FsiError::Integration("dt must be positive and t_end non-negative".into()));
    }
    let steps = (opts.t_end / opts.dt).round() as usize;
    let dt = opts.dt;
    let a = sys.a();
    let b = sys.b();
    let n_act = b.ncols();
    let mut rt = match law {
        Some(l) if l.n_gamma > 0 => {
            if l.n_act() != n_act || l.modes.nrows() != n {
                return Err(FsiError::Integration("feedback law does not match the system dimensions".into()));
            }
            Some(DelayRuntime::new(l, opts.form, dt)?)
        }
        _ => None,
    };
    let instantaneous = rt.as_ref().is_some_and(|r| r.is_instantaneous());
    let stepper = match (law, instantaneous) {
        (Some(l), true) => Stepper::new(&(a + b * &l.gain * l.modes.transpose()), dt),
        _ => Stepper::new(a, dt),
    };
    let ext = |t: f64| -> DVector<f64> {
        match input {
            Some(f) => f(t),
            None => DVector::zeros(n_act),
        }
    };
    let zero_n = DVector::zeros(n);
    let power = |w: &DVector<f64>, u: &DVector<f64>, nl: &DVector<f64>| w.dot(&(a * w)) + w.dot(&(b * u)) + w.dot(nl);

    let mut w = w0.clone();
    let mut v = DVector::zeros(n_act);
    if let (Some(r), Some(l)) = (rt.as_mut(), law) {
        r.record_state(l.reduce(&w));
        v = r.control(0)?;
    }
    let mut traj = Trajectory::default();
    let e0 = 0.5 * w.norm_squared();
    let mut work = 0.0;
    let mut prev_power = power(&w, &(&v + ext(0.0)), &zero_n);
    let record = |traj: &mut Trajectory, t: f64, w: &DVector<f64>, v: &DVector<f64>, res: f64, it: usize| {
        traj.times.push(t);
        traj.norms.push(w.norm());
        traj.components.push(sys.component_norms(w));
        traj.control_norms.push(v.norm());
        traj.energy_residual.push(res);
        traj.picard_iterations.push(it);
        traj.states.push(w.clone());
    };
    record(&mut traj, 0.0, &w, &v, 0.0, 0);
    let every = opts.record_every.max(1);

    for step in 0..steps {
        let t = step as f64 * dt;
        let t1 = (step + 1) as f64 * dt;
        let (v_next, right) = match rt.as_mut() {
            Some(r) if !instantaneous => {
                let vn = r.control(step + 1)?;
                let right = r.left_limit(step + 1, &vn);
                (vn, right)
            }
            _ => (DVector::zeros(n_act), DVector::zeros(n_act)),
        };
        let u0 = ext(t);
        let u1 = ext(t1);
        let switch_on = rt.as_ref().map(|r| r.delay_steps()).filter(|&m| m > 0);
        let euler = switch_on.is_some_and(|m| step >= m && step < m + opts.smoothing_steps);
        let base = if euler {
            &w + b * (&right + &u1) * dt
        } else {
            &w + (a * &w) * (0.5 * dt) + b * (&v + &right + &u0 + &u1) * (0.5 * dt)
        };
        let mut w1 = stepper.solve(&base, euler);
        let mut nl_mid = zero_n.clone();
        let mut iters = 0;
        if let Some(nlf) = nonlinear {
            let mut last_diff = f64::INFINITY;
            let mut growth = 0;
            loop {
                iters += 1;
                let at = if euler { w1.clone() } else { (&w + &w1) * 0.5 };
                let wdot = (&w1 - &w) / dt;
                nl_mid = nlf(&at, &wdot).map_err(|e| match e {
                    FsiError::Integration(_) => e,
                    other => FsiError::Integration(format!("nonlinear term at t={}: {other}", fmt_f64(t1))),
                })?;
                let next = stepper.solve(&(&base + &nl_mid * dt), euler);
                let diff = (&next - &w1).norm();
                w1 = next;
                if diff <= opts.picard_tol * w1.norm().max(f64::MIN_POSITIVE) {
                    break;
                }
                growth = if diff > last_diff { growth + 1 } else { 0 };
                if growth >= 5 || !diff.is_finite() {
                    return Err(FsiError::Integration(format!(
                        "Picard iteration diverged at t={} (update {:e})",
                        fmt_f64(t1),
                        diff
                    )));
                }
                if iters >= opts.picard_max {
                    return Err(FsiError::Integration(format!(
                        "Picard iteration did not converge in {} iterations at t={} (update {:e})",
                        opts.picard_max,
                        fmt_f64(t1),
                        diff
                    )));
                }
                last_diff = diff;
            }
        }
        if !w1.iter().all(|x| x.is_finite()) {
            return Err(FsiError::Integration(format!("non-finite state at t={}", fmt_f64(t1))));
        }
        // energy work over the step, with the quadrature matching the step's scheme
        let lin_right = w1.dot(&(a * &w1)) + w1.dot(&(b * (&right + &u1)));
        work += if euler {
            dt * (lin_right + w1.dot(&nl_mid))
        } else {
            0.5 * dt * (prev_power + lin_right) + dt * ((&w + &w1) * 0.5).dot(&nl_mid)
        };
        w = w1;
        if let (Some(r), Some(l)) = (rt.as_mut(), law) {
            r.record_state(l.reduce(&w));
            v = if instantaneous { r.control(step + 1)? } else { v_next };
        }
        prev_power = power(&w, &(&v + &u1), &zero_n);
        if (step + 1) % every == 0 || step + 1 == steps {
            let res = 0.5 * w.norm_squared() - e0 - work;
            record(&mut traj, t1, &w, &v, res, iters);
        }
    }
    traj.final_state = w;
    Ok(traj)
}

/// Linear closed-loop (or open-loop) run.
pub fn integrate_linear<S: LinearControlSystem + ?Sized>(
    sys: &S,
    law: Option<&FeedbackLaw>,
    w0: &DVector<f64>,
    opts: &SimOptions,
    input: Option<InputSignal>,
) -> Result<Trajectory> {
    integrate(sys, law, w0, opts, input, None)
}

/// Run of the full transformed system including the quadratic remainder.
pub fn integrate_nonlinear(
    sys: &DiscreteSystem,
    law: Option<&FeedbackLaw>,
    w0: &DVector<f64>,
    opts: &SimOptions,
    input: Option<InputSignal>,
) -> Result<Trajectory> {
    let nl = |w: &DVector<f64>, wt: &DVector<f64>| nonlinear_forcing(sys, w, wt);
    integrate(sys, law, w0, opts, input, Some(&nl))
}

/// Projected quadratic remainder of the perturbation system at state `w` with rate `w_t`.
pub fn nonlinear_forcing(sys: &DiscreteSystem, w: &DVector<f64>, w_t: &DVector<f64>) -> Result<DVector<f64>> {
    let g = &sys.galerkin;
    let st = &sys.stationary;
    let dom = &st.domain;
    let len = g.basis.length;
    let u = g.eval.velocity(w);
    let u_t = g.eval.velocity(w_t);
    let (x1, x2) = g.basis.plate_coeffs(w);
    let xi = g.quad.profile(&x1, len);
    let xi_t = g.quad.profile(&x2, len);
    // perturbation pressure from the linearized momentum balance
    let nq = g.quad.len();
    let nu = g.physics.nu;
    let lap: [Vec<f64>; 2] = [0, 1].map(|i| (&g.eval.uxx[i] * w + &g.eval.uyy[i] * w).as_slice().to_vec());
    let c1 = convection(dom, &u, &st.w);
    let c2 = convection(dom, &st.w, &u);
    let grad_p: VectorField =
        [0, 1].map(|i| (0..nq).map(|q| nu * lap[i][q] - u_t[i][q] - c1[i][q] - c2[i][q]).collect());
    let p = g.pressure.solve(&grad_p);
    let lin = sys.lin.combine(&x1, &x2);
    let pert = Perturbation { u: &u, p: &p, u_t: &u_t, xi: &xi, xi_t: &xi_t };
    let r = residual_from(st, &remainders(st, &pert, &lin)?);
    Ok(sys.project_residual(&r))
}

/// Mean of the plate velocity profile of a state (preserved by the dynamics).
pub fn plate_velocity_mean(sys: &DiscreteSystem, w: &DVector<f64>) -> f64 {
    let g = &sys.galerkin;
    let (_, x2) = g.basis.plate_coeffs(w);
    let prof = g.quad.profile(&x2, g.basis.length);
    prof.values.iter().sum::<f64>() / prof.values.len() as f64
}
