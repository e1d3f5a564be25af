//! Time-delayed finite-dimensional feedback: Artstein reduction of the unstable
//! block, modal pole placement, and the control-history runtime in recursion
//! and kernel form.

use crate::discretization::LinearControlSystem;
use crate::error::{FsiError, Result};
use crate::numerics::{eigen_dense, fmt_f64};
use crate::spectral_analysis::{hautus_test, unstable_mode_count, Spectrum, UnstableSubspace};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Matrix exponential by scaling and squaring with a Padé approximant.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return a.clone();
    }
    a.clone().exp()
}

/// The delay-free input matrix `exp(-A_u t0) B_u` of the Artstein variable.
pub fn artstein_reduce(a_u: &DMatrix<f64>, b_u: &DMatrix<f64>, t0: f64) -> Result<DMatrix<f64>> {
    if !(t0 >= 0.0) || !t0.is_finite() {
        return Err(FsiError::Synthesis(format!("delay must be non-negative, got {t0}")));
    }
    Ok(matrix_exp(&(a_u * (-t0))) * b_u)
}

/// Numerical rank of the Kalman matrix `[B, AB, ..., A^{N-1}B]` with columns
/// scaled per block to limit growth.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    if n == 0 {
        return 0;
    }
    let scale = a.norm().max(1.0);
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = (a * cur) / scale;
    }
    let k = DMatrix::from_fn(n, n * b.ncols(), |i, j| blocks[j / b.ncols()][(i, j % b.ncols())]);
    let sv = k.singular_values();
    let smax = sv.max();
    sv.iter().filter(|&&s| s > 1e-10 * smax.max(f64::MIN_POSITIVE)).count()
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    // monic, coefficients c_0..c_{n-1} of s^n + c_{n-1} s^{n-1} + ... + c_0
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= ci * r;
        }
        c = next;
    }
    c.iter().take(roots.len()).map(|z| z.re).collect()
}

/// Single-input Ackermann gain `k` (row) with eigenvalues of `A + b k` at `roots`.
fn ackermann(a: &DMatrix<f64>, b: &DVector<f64>, roots: &[Complex64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a * col;
    }
    let coeffs = poly_from_roots(roots);
    let mut pa = DMatrix::identity(n, n);
    let mut acc = DMatrix::identity(n, n) * coeffs[0];
    for c in coeffs.iter().skip(1) {
        pa = &pa * a;
        acc += &pa * *c;
    }
    pa = &pa * a;
    acc += pa;
    let mut en = DVector::zeros(n);
    en[n - 1] = 1.0;
    let y = ctrb
        .transpose()
        .lu()
        .solve(&en)
        .ok_or_else(|| FsiError::Synthesis("controllability rank deficiency: synthesis refused".into()))?;
    let k = -(y.transpose() * acc);
    Ok(DMatrix::from_row_slice(1, n, k.as_slice()))
}

/// Gain `F` such that every eigenvalue of `A + B F` with `Re > -(gamma+margin)` is moved
/// to `-(gamma+margin) + i Im`; the others are left in place.
///
/// Modes are deflated one real eigenvalue or conjugate pair at a time through the
/// corresponding left eigenvectors, which handles several inputs and repeated modes.
pub fn place_poles(a: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64, margin: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if margin < 0.0 {
        return Err(FsiError::Synthesis(format!("margin must be non-negative, got {margin}")));
    }
    let target = -(gamma + margin);
    let mut f = DMatrix::zeros(b.ncols(), n);
    if n == 0 {
        return Ok(f);
    }
    let scale = a.norm().max(1.0);
    // coinciding real targets form Jordan blocks, whose eigenvalues are only
    // determined to about sqrt(eps)
    let tol = 1e-6 * scale;
    let mut acl = a.clone();
    for _ in 0..n {
        let (vals, vecs) = eigen_dense(&acl.transpose())?;
        let pick = (0..n)
            .filter(|&i| vals[i].re > target + tol && vals[i].im >= -tol)
            .max_by(|&i, &j| vals[i].re.total_cmp(&vals[j].re));
        let Some(i) = pick else { break };
        let lambda = vals[i];
        let psi = vecs.column(i).into_owned();
        if lambda.im.abs() <= tol {
            let k = (0..n).max_by(|&p, &q| psi[p].norm().total_cmp(&psi[q].norm())).unwrap_or(0);
            let phase = psi[k] / Complex64::new(psi[k].norm(), 0.0);
            let l = (&psi / phase).map(|z| z.re);
            let lb = b.tr_mul(&l);
            let nb = lb.norm();
            if nb <= 1e-12 * l.norm() * b.norm().max(1.0) {
                return Err(FsiError::Synthesis(format!(
                    "mode {} is not reachable by the actuators: synthesis refused",
                    fmt_f64(lambda.re)
                )));
            }
            let g = &lb / nb;
            let c = (target - lambda.re) / nb;
            let upd = &g * l.transpose() * c;
            acl += b * &upd;
            f += upd;
        } else {
            let lmat = DMatrix::from_columns(&[psi.map(|z| z.re), psi.map(|z| z.im)]);
            let gram = lmat.tr_mul(&lmat);
            let ginv = gram.try_inverse().ok_or_else(|| FsiError::Synthesis("degenerate modal pair".into()))?;
            let lam = lmat.transpose() * &acl * &lmat * ginv;
            let lb = lmat.tr_mul(b);
            let svd = lb.clone().svd(false, true);
            let vt = svd.v_t.ok_or_else(|| FsiError::Synthesis("svd failed".into()))?;
            if svd.singular_values.max() <= 1e-12 * lmat.norm() * b.norm().max(1.0) {
                return Err(FsiError::Synthesis(format!(
                    "mode pair {}±{}i is not reachable by the actuators: synthesis refused",
                    fmt_f64(lambda.re),
                    fmt_f64(lambda.im.abs())
                )));
            }
            let g = vt.row(0).transpose();
            let b2 = &lb * &g;
            let roots = [Complex64::new(target, lambda.im), Complex64::new(target, -lambda.im)];
            let k = ackermann(&lam, &b2, &roots)?;
            let upd = &g * (k * lmat.transpose());
            acl += b * &upd;
            f += upd;
        }
    }
    let (vals, _) = eigen_dense(&acl)?;
    if let Some(z) = vals.iter().find(|z| z.re > target + tol) {
        return Err(FsiError::Synthesis(format!("pole placement did not converge: eigenvalue {z} remains")));
    }
    Ok(f)
}

/// Row-major dense matrix for JSON exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMajor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for RowMajor {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl RowMajor {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(FsiError::Synthesis("matrix data length does not match its shape".into()));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// The synthesized delayed feedback
/// `v(t) = 1_{t >= t0} F [z(t-t0) + int_{t-t0}^t exp(A_u (t-s-t0)) B_u v(s) ds]`, `z = U^T W`.
#[derive(Clone, Debug)]
pub struct FeedbackLaw {
    pub gamma: f64,
    pub margin: f64,
    pub t0: f64,
    pub n_gamma: usize,
    pub a_u: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    /// Gain on the Artstein variable (n_act x N).
    pub gain: DMatrix<f64>,
    /// Adjoint modes `Phi_k` (columns of `U`, n x N): `z_k = <Phi_k, W>`.
    pub modes: DMatrix<f64>,
    /// Right basis of the unstable subspace (n x N).
    pub right: DMatrix<f64>,
    pub values: Vec<Complex64>,
}

impl FeedbackLaw {
    /// The trivial law (no unstable modes).
    pub fn zero(n: usize, n_act: usize, gamma: f64, margin: f64, t0: f64) -> Self {
        Self {
            gamma,
            margin,
            t0,
            n_gamma: 0,
            a_u: DMatrix::zeros(0, 0),
            b_u: DMatrix::zeros(0, n_act),
            b_tilde: DMatrix::zeros(0, n_act),
            gain: DMatrix::zeros(n_act, 0),
            modes: DMatrix::zeros(n, 0),
            right: DMatrix::zeros(n, 0),
            values: Vec::new(),
        }
    }

    pub fn n_act(&self) -> usize {
        self.gain.nrows()
    }

    /// Gain directions `v_k` (columns of `F`).
    pub fn directions(&self) -> Vec<DVector<f64>> {
        self.gain.column_iter().map(|c| c.into_owned()).collect()
    }

    /// Closed-loop reduced matrix `A_u + B~ F`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a_u + &self.b_tilde * &self.gain
    }

    pub fn closed_loop_eigenvalues(&self) -> Result<Vec<Complex64>> {
        if self.n_gamma == 0 {
            return Ok(Vec::new());
        }
        Ok(eigen_dense(&self.closed_loop())?.0)
    }

    pub fn reduce(&self, w: &DVector<f64>) -> DVector<f64> {
        self.modes.tr_mul(w)
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = FeedbackLawRecord {
            gamma: self.gamma,
            margin: self.margin,
            t0: self.t0,
            n_gamma: self.n_gamma,
            a_u: (&self.a_u).into(),
            b_u: (&self.b_u).into(),
            b_tilde: (&self.b_tilde).into(),
            gain: (&self.gain).into(),
            modes: (&self.modes).into(),
            right: (&self.right).into(),
            eigenvalues: self.values.iter().map(|z| [z.re, z.im]).collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: FeedbackLawRecord = serde_json::from_str(text)?;
        Ok(Self {
            gamma: r.gamma,
            margin: r.margin,
            t0: r.t0,
            n_gamma: r.n_gamma,
            a_u: r.a_u.to_matrix()?,
            b_u: r.b_u.to_matrix()?,
            b_tilde: r.b_tilde.to_matrix()?,
            gain: r.gain.to_matrix()?,
            modes: r.modes.to_matrix()?,
            right: r.right.to_matrix()?,
            values: r.eigenvalues.iter().map(|v| Complex64::new(v[0], v[1])).collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeedbackLawRecord {
    gamma: f64,
    margin: f64,
    t0: f64,
    n_gamma: usize,
    a_u: RowMajor,
    b_u: RowMajor,
    b_tilde: RowMajor,
    gain: RowMajor,
    modes: RowMajor,
    right: RowMajor,
    eigenvalues: Vec<[f64; 2]>,
}

/// Builds the law from a computed unstable subspace.
pub fn law_from_subspace(sub: &UnstableSubspace, n_act: usize, t0: f64, margin: f64) -> Result<FeedbackLaw> {
    let n = sub.right.nrows();
    if sub.n_gamma == 0 {
        return Ok(FeedbackLaw::zero(n, n_act, sub.gamma, margin, t0));
    }
    if controllability_rank(&sub.a_u, &sub.b_u) < sub.n_gamma {
        return Err(FsiError::Synthesis(
            "controllability rank deficiency of the unstable block: synthesis refused".into(),
        ));
    }
    let b_tilde = artstein_reduce(&sub.a_u, &sub.b_u, t0)?;
    let gain = place_poles(&sub.a_u, &b_tilde, sub.gamma, margin)?;
    let law = FeedbackLaw {
        gamma: sub.gamma,
        margin,
        t0,
        n_gamma: sub.n_gamma,
        a_u: sub.a_u.clone(),
        b_u: sub.b_u.clone(),
        b_tilde,
        gain,
        modes: sub.left.clone(),
        right: sub.right.clone(),
        values: sub.values.clone(),
    };
    let bound = -(sub.gamma + margin) + 1e-6 * sub.a_u.norm().max(1.0);
    if let Some(z) = law.closed_loop_eigenvalues()?.iter().find(|z| z.re > bound) {
        return Err(FsiError::Synthesis(format!("closed-loop reduced eigenvalue {z} above the target line")));
    }
    Ok(law)
}

/// Full synthesis: Hautus precondition, unstable projection, Artstein reduction and pole placement.
pub fn synthesize<S: LinearControlSystem + ?Sized>(
    sys: &S,
    spectrum: &Spectrum,
    gamma: f64,
    t0: f64,
    margin: f64,
    tol_rel: f64,
) -> Result<FeedbackLaw> {
    let rep = hautus_test(sys, spectrum, gamma, tol_rel)?;
    if !rep.passed {
        return Err(FsiError::Criterion(format!(
            "Hautus test failed for sigma={} (min ratio {:e}, complete={})",
            fmt_f64(gamma),
            rep.min_ratio,
            rep.complete
        )));
    }
    let sub = unstable_mode_count(sys, spectrum, gamma)?;
    law_from_subspace(&sub, sys.b().ncols(), t0, margin)
}

/// How the runtime evaluates the delayed control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlForm {
    /// Control-history recursion over the window `[t-t0, t]`.
    Recursion,
    /// Volterra kernel acting on the reduced state history over `[0, t-t0]`.
    Kernel,
}

/// Discrete realization of the feedback on a uniform time grid `t_n = n dt`.
///
/// The window integral uses the trapezoid rule. The kernel form uses the exact
/// discrete resolvent of the same quadrature, so both forms agree to roundoff.
#[derive(Clone, Debug)]
pub struct DelayRuntime {
    pub form: ControlForm,
    pub dt: f64,
    /// Delay in steps.
    pub m: usize,
    gain: DMatrix<f64>,
    /// `h w_j exp(A_u (j h - t0)) B_u`, `j = 0..=m`.
    window: Vec<DMatrix<f64>>,
    implicit: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    resolvent: Vec<DMatrix<f64>>,
    z_hist: Vec<DVector<f64>>,
    v_hist: Vec<DVector<f64>>,
    n_act: usize,
}

impl DelayRuntime {
    pub fn new(law: &FeedbackLaw, form: ControlForm, dt: f64) -> Result<Self> {
        let ratio = law.t0 / dt;
        let m = ratio.round() as usize;
        if !(dt > 0.0) || (ratio - m as f64).abs() > 1e-9 * ratio.max(1.0) {
            return Err(FsiError::Integration(format!(
                "the delay t0={} must be an integer multiple of dt={}",
                fmt_f64(law.t0),
                fmt_f64(dt)
            )));
        }
        if m > 0 && m < 4 {
            return Err(FsiError::Integration(format!("dt={} must not exceed t0/4", fmt_f64(dt))));
        }
        let n_act = law.n_act();
        let window: Vec<DMatrix<f64>> = if m == 0 || law.n_gamma == 0 {
            Vec::new()
        } else {
            let step = matrix_exp(&(&law.a_u * dt));
            let mut e = matrix_exp(&(&law.a_u * (-law.t0)));
            let mut out = Vec::with_capacity(m + 1);
            for j in 0..=m {
                let w = if j == 0 || j == m { 0.5 } else { 1.0 };
                out.push(&e * &law.b_u * (dt * w));
                e = &e * &step;
            }
            out
        };
        let implicit = window.first().map(|g0| (DMatrix::identity(n_act, n_act) - &law.gain * g0).lu());
        Ok(Self {
            form,
            dt,
            m,
            gain: law.gain.clone(),
            window,
            implicit,
            resolvent: Vec::new(),
            z_hist: Vec::new(),
            v_hist: Vec::new(),
            n_act,
        })
    }

    pub fn delay_steps(&self) -> usize {
        self.m
    }

    /// True when the control at step `n` depends on the state at the same step (no delay).
    pub fn is_instantaneous(&self) -> bool {
        self.m == 0
    }

    pub fn n_act(&self) -> usize {
        self.n_act
    }

    /// Discrete resolvent weights `r_j` of `v = f + g~ * v` with `g~_j = F window_j`.
    fn extend_resolvent(&mut self, upto: usize) {
        let lu = match &self.implicit {
            Some(lu) => lu.clone(),
            None => return,
        };
        let gt: Vec<DMatrix<f64>> = self.window.iter().map(|g| &self.gain * g).collect();
        while self.resolvent.len() <= upto {
            let j = self.resolvent.len();
            let mut rhs = if j < gt.len() { gt[j].clone() } else { DMatrix::zeros(self.n_act, self.n_act) };
            for i in 1..=j.min(self.m) {
                rhs += &gt[i] * &self.resolvent[j - i];
            }
            let r = lu.solve(&rhs).unwrap_or_else(|| DMatrix::zeros(self.n_act, self.n_act));
            self.resolvent.push(r);
        }
    }

    /// Records the reduced state `z_n = U^T W_n`; steps must be recorded in order.
    pub fn record_state(&mut self, z: DVector<f64>) {
        self.z_hist.push(z);
    }

    /// Control `v_n` (right-continuous) for step `n`; requires `z_{n-m}` recorded and
    /// all earlier controls computed. The value is stored in the history.
    pub fn control(&mut self, n: usize) -> Result<DVector<f64>> {
        if n != self.v_hist.len() {
            return Err(FsiError::Integration("controls must be computed in order".into()));
        }
        let v = if n < self.m || self.gain.ncols() == 0 {
            DVector::zeros(self.n_act)
        } else {
            let z = self
                .z_hist
                .get(n - self.m)
                .cloned()
                .ok_or_else(|| FsiError::Integration("state history does not cover the delay".into()))?;
            match self.form {
                ControlForm::Recursion => {
                    let mut c = z;
                    for j in 1..self.window.len() {
                        if n >= j && n - j >= self.m {
                            c += &self.window[j] * &self.v_hist[n - j];
                        }
                    }
                    let fc = &self.gain * c;
                    match &self.implicit {
                        Some(lu) => {
                            lu.solve(&fc).ok_or_else(|| FsiError::Integration("singular control recursion".into()))?
                        }
                        None => fc,
                    }
                }
                ControlForm::Kernel => {
                    self.extend_resolvent(n - self.m);
                    let mut v = &self.gain * &z;
                    if !self.resolvent.is_empty() {
                        for i in self.m..=n {
                            let f = &self.gain * &self.z_hist[i - self.m];
                            v += &self.resolvent[n - i] * f;
                        }
                    }
                    v
                }
            }
        };
        self.v_hist.push(v.clone());
        Ok(v)
    }

    /// Value of the control approaching `t_n` from the left: zero at the switch-on time `t0 > 0`.
    pub fn left_limit(&self, n: usize, v: &DVector<f64>) -> DVector<f64> {
        if self.m > 0 && n == self.m {
            DVector::zeros(v.len())
        } else {
            v.clone()
        }
    }

    /// Drops the most recent control (used when an implicit step is redone).
    pub fn pop_control(&mut self) {
        self.v_hist.pop();
    }

    pub fn pop_state(&mut self) {
        self.z_hist.pop();
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.v_hist
    }
}

/// Sampled Volterra kernel `K(tau, s) = R(tau - s) F U^T` of the law
/// `v(t) = 1_{t>=t0} [F U^T W(t-t0) + int_0^{t-t0} K(t-t0, s) W(s) ds]`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub dt: f64,
    pub t0: f64,
    /// Samples of `R` (n_act x n_act) at `j dt`.
    pub samples: Vec<DMatrix<f64>>,
    pub feedback: DMatrix<f64>,
}

impl KernelTable {
    /// Kernel at `(tau, s)` by linear interpolation in `tau - s`; zero outside `0 <= s <= tau`.
    pub fn kernel(&self, tau: f64, s: f64) -> DMatrix<f64> {
        let (na, n) = (self.feedback.nrows(), self.feedback.ncols());
        let r = tau - s;
        if r < 0.0 || s < 0.0 || self.samples.is_empty() {
            return DMatrix::zeros(na, n);
        }
        let x = r / self.dt;
        let j = x.floor() as usize;
        if j + 1 >= self.samples.len() {
            return self.samples.last().map(|m| m * &self.feedback).unwrap_or_else(|| DMatrix::zeros(na, n));
        }
        let th = x - j as f64;
        (&self.samples[j] * (1.0 - th) + &self.samples[j + 1] * th) * &self.feedback
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Rec {
            dt: f64,
            t0: f64,
            feedback: RowMajor,
            samples: Vec<RowMajor>,
        }
        Ok(serde_json::to_string(&Rec {
            dt: self.dt,
            t0: self.t0,
            feedback: (&self.feedback).into(),
            samples: self.samples.iter().map(|m| m.into()).collect(),
        })?)
    }
}

/// Unrolls the control-history recursion into the kernel of the law, sampled on `[0, horizon]`.
pub fn export_kernel(law: &FeedbackLaw, dt: f64, horizon: f64) -> Result<KernelTable> {
    let mut rt = DelayRuntime::new(law, ControlForm::Kernel, dt)?;
    let steps = (horizon / dt).ceil() as usize;
    rt.extend_resolvent(steps);
    // R(0) = G(0); the discrete r_0 carries the half trapezoid weight and the implicit factor
    let g0 = rt.window.first().map(|g| &rt.gain * g * (2.0 / dt));
    let samples = rt
        .resolvent
        .iter()
        .enumerate()
        .map(|(j, r)| match (&g0, j) {
            (Some(g), 0) => g.clone(),
            _ => r / dt,
        })
        .collect();
    Ok(KernelTable { dt, t0: law.t0, samples, feedback: &law.gain * law.modes.transpose() })
}
