//! Operators of the fluid equations pulled back to the fixed domain
//! `Omega(eta^S)` through `X = X_{eta^S, eta}`, their linearization around a
//! stationary state and the nonlinear remainders.
//!
//! Index convention (2D): component 0 is horizontal, component 1 vertical.

use crate::error::{FsiError, Result};
use crate::geometry::{PlateProfile, ReferenceDomain};
use crate::numerics::fourier_derivative;
use std::sync::Arc;

pub type VectorField = [Vec<f64>; 2];
/// `m[i][j]` holds the nodal values of entry `(i, j)`.
pub type MatrixField = [[Vec<f64>; 2]; 2];

const D: usize = 2;

/// Velocity on the reference grid with an optional pressure.
#[derive(Clone, Debug)]
pub struct FluidField {
    pub u: VectorField,
    pub p: Option<Vec<f64>>,
}

impl FluidField {
    pub fn zero(n: usize) -> Self {
        Self { u: [vec![0.0; n], vec![0.0; n]], p: Some(vec![0.0; n]) }
    }

    pub fn from_fn(domain: &ReferenceDomain, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let vals: Vec<[f64; 2]> = domain.points().into_iter().map(f).collect();
        Self { u: [vals.iter().map(|v| v[0]).collect(), vals.iter().map(|v| v[1]).collect()], p: None }
    }

    pub fn pressure(&self) -> Vec<f64> {
        self.p.clone().unwrap_or_else(|| vec![0.0; self.u[0].len()])
    }
}

pub fn zeros_v(n: usize) -> VectorField {
    [vec![0.0; n], vec![0.0; n]]
}

pub fn zeros_m(n: usize) -> MatrixField {
    [[vec![0.0; n], vec![0.0; n]], [vec![0.0; n], vec![0.0; n]]]
}

pub fn axpy_v(a: f64, x: &VectorField, y: &VectorField) -> VectorField {
    [x[0].iter().zip(&y[0]).map(|(p, q)| a * p + q).collect(), x[1].iter().zip(&y[1]).map(|(p, q)| a * p + q).collect()]
}

pub fn scale_v(a: f64, x: &VectorField) -> VectorField {
    [x[0].iter().map(|v| a * v).collect(), x[1].iter().map(|v| a * v).collect()]
}

fn flat_m(m: &MatrixField) -> Vec<f64> {
    m.iter().flat_map(|r| r.iter().flat_map(|c| c.iter().copied())).collect()
}

fn unflat_m(v: &[f64], n: usize) -> MatrixField {
    let mut out = zeros_m(n);
    for i in 0..D {
        for j in 0..D {
            out[i][j].copy_from_slice(&v[(i * D + j) * n..(i * D + j + 1) * n]);
        }
    }
    out
}

fn flat_v(v: &VectorField) -> Vec<f64> {
    v[0].iter().chain(&v[1]).copied().collect()
}

fn unflat_v(v: &[f64], n: usize) -> VectorField {
    [v[..n].to_vec(), v[n..2 * n].to_vec()]
}

pub fn norm_v(v: &VectorField) -> f64 {
    v.iter().flat_map(|c| c.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_m(m: &MatrixField) -> f64 {
    flat_m(m).iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Analytic stationary body force: value and gradient at a physical point.
pub type Forcing = Arc<dyn Fn([f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) + Send + Sync>;

/// Physical parameters of the coupled system.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Physics {
    pub nu: f64,
    pub alpha: f64,
    pub delta: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self { nu: 0.1, alpha: 1.0, delta: 0.5, beta1: 0.1, beta2: 0.1 }
    }
}

/// Which index ordering to use in the second term of `E`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EForm {
    /// Consistent with the Piola identity, so that `H(w, eta) = -T*(E_eta(w) n)` holds exactly.
    Piola,
    /// The ordering `dY_m/dx_i dY_l/dx_j` with the flat term `delta_mi div u`.
    Literal,
}

/// Stationary state on the reference grid.
#[derive(Clone)]
pub struct StationaryState {
    pub domain: ReferenceDomain,
    pub w: VectorField,
    pub p: Vec<f64>,
    pub physics: Physics,
    pub forcing: Option<Forcing>,
}

impl std::fmt::Debug for StationaryState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StationaryState").field("physics", &self.physics).finish_non_exhaustive()
    }
}

impl StationaryState {
    pub fn eta_s(&self) -> &PlateProfile {
        &self.domain.eta_s
    }
}

/// Geometric coefficients of `X_{eta^S, eta}` at one node.
#[derive(Clone, Copy, Debug, Default)]
pub struct NodeGeom {
    pub det: f64,
    pub ddet: [f64; 2],
    /// `dx[q][m] = dX_q / dy_m`
    pub dx: [[f64; 2]; 2],
    /// `a = (Cof grad Y)^T` at `X(y)`
    pub a: [[f64; 2]; 2],
    /// `da[i][k][j] = d a_ik / d x_j`
    pub da: [[[f64; 2]; 2]; 2],
    /// `d2a[i][k][j][l] = d^2 a_ik / dx_j dx_l`
    pub d2a: [[[[f64; 2]; 2]; 2]; 2],
    /// `dy[m][j] = dY_m / dx_j` at `X(y)`
    pub dy: [[f64; 2]; 2],
    /// `d2y[m][j][l] = d^2 Y_m / dx_j dx_l`
    pub d2y: [[[f64; 2]; 2]; 2],
    pub dty: [f64; 2],
    pub dta: [[f64; 2]; 2],
}

/// Nodal geometry for a deformed profile `eta` and plate velocity `xi_t`.
#[derive(Clone, Debug)]
pub struct Transform {
    pub nodes: Vec<NodeGeom>,
    pub eta: PlateProfile,
    pub xi_t: PlateProfile,
}

impl Transform {
    pub fn new(domain: &ReferenceDomain, eta: &PlateProfile, xi_t: Option<&PlateProfile>) -> Result<Self> {
        eta.check_admissible()?;
        if eta.grid != domain.grid {
            return Err(FsiError::Resolution("profile grid differs from reference grid".into()));
        }
        let l = domain.grid.periods[0];
        let (nx, nz) = (domain.nx(), domain.nz());
        let g: Vec<f64> = (0..nx).map(|i| domain.rho1[i] / (1.0 + eta.values[i])).collect();
        let g1 = fourier_derivative(&g, l, 1);
        let g2 = fourier_derivative(&g, l, 2);
        let g3 = fourier_derivative(&g, l, 3);
        let xi_t = xi_t.cloned().unwrap_or_else(|| PlateProfile::zero(&domain.grid));
        if xi_t.grid != domain.grid {
            return Err(FsiError::Resolution("plate velocity grid differs from reference grid".into()));
        }
        let gt: Vec<f64> = (0..nx).map(|i| -domain.rho1[i] * xi_t.values[i] / (1.0 + eta.values[i]).powi(2)).collect();
        let gt1 = fourier_derivative(&gt, l, 1);
        let mut nodes = Vec::with_capacity(nx * nz);
        for ix in 0..nx {
            let (gg, ga, gb, gc) = (g[ix], g1[ix], g2[ix], g3[ix]);
            let h = 1.0 / gg;
            let h1 = -ga / (gg * gg);
            for iz in 0..nz {
                let y3 = domain.zeta[iz] * domain.rho1[ix];
                let x3 = y3 * h;
                let mut ng = NodeGeom { det: h, ddet: [h1, 0.0], ..Default::default() };
                ng.dx = [[1.0, 0.0], [y3 * h1, h]];
                ng.a = [[gg, 0.0], [-x3 * ga, 1.0]];
                ng.da[0][0][0] = ga;
                ng.da[1][0][0] = -x3 * gb;
                ng.da[1][0][1] = -ga;
                ng.d2a[0][0][0][0] = gb;
                ng.d2a[1][0][0][0] = -x3 * gc;
                ng.d2a[1][0][0][1] = -gb;
                ng.d2a[1][0][1][0] = -gb;
                ng.dy = [[1.0, 0.0], [x3 * ga, gg]];
                ng.d2y[1][0][0] = x3 * gb;
                ng.d2y[1][0][1] = ga;
                ng.d2y[1][1][0] = ga;
                ng.dty = [0.0, x3 * gt[ix]];
                ng.dta[0][0] = gt[ix];
                ng.dta[1][0] = -x3 * gt1[ix];
                nodes.push(ng);
            }
        }
        Ok(Self { nodes, eta: eta.clone(), xi_t })
    }
}

/// First and second derivatives of a vector field: `d1[k][l] = d u_k / dy_l`,
/// `d2[k][l][m] = d^2 u_k / dy_l dy_m`.
pub struct Derivs {
    pub d1: [[Vec<f64>; 2]; 2],
    pub d2: [[[Vec<f64>; 2]; 2]; 2],
}

pub fn derivs(domain: &ReferenceDomain, u: &VectorField) -> Derivs {
    let g0 = domain.grad(&u[0]);
    let g1 = domain.grad(&u[1]);
    let mk = |g: &[Vec<f64>; 2]| {
        let a = domain.grad(&g[0]);
        let b = domain.grad(&g[1]);
        // symmetrize the mixed derivative
        let mixed: Vec<f64> = a[1].iter().zip(&b[0]).map(|(p, q)| 0.5 * (p + q)).collect();
        [[a[0].clone(), mixed.clone()], [mixed, b[1].clone()]]
    };
    let d2 = [mk(&g0), mk(&g1)];
    Derivs { d1: [g0, g1], d2 }
}

pub fn divergence_v(domain: &ReferenceDomain, u: &VectorField) -> Vec<f64> {
    domain.divergence(u)
}

pub fn divergence_m(domain: &ReferenceDomain, e: &MatrixField) -> VectorField {
    let mut out = zeros_v(domain.len());
    for i in 0..D {
        let g0 = domain.grad(&e[i][0]);
        let g1 = domain.grad(&e[i][1]);
        out[i] = g0[0].iter().zip(&g1[1]).map(|(a, b)| a + b).collect();
    }
    out
}

/// `-p I + nu (grad u + grad u^T)` at every node.
pub fn stress_tensor(domain: &ReferenceDomain, u: &VectorField, p: &[f64], nu: f64) -> MatrixField {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let n = domain.len();
    let mut t = zeros_m(n);
    for i in 0..D {
        for j in 0..D {
            for k in 0..n {
                t[i][j][k] = nu * (g[i][j][k] + g[j][i][k]) - if i == j { p[k] } else { 0.0 };
            }
        }
    }
    t
}

/// `K_eta u = (grad X) u`.
pub fn op_k(tr: &Transform, u: &VectorField) -> VectorField {
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    for (k, ng) in tr.nodes.iter().enumerate() {
        for i in 0..D {
            out[i][k] = (0..D).map(|j| ng.dx[i][j] * u[j][k]).sum();
        }
    }
    out
}

/// The viscous defect `-nu (Delta - L_eta) u`.
pub fn op_l(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField) -> VectorField {
    let dv = derivs(domain, u);
    op_l_with(tr, nu, u, &dv, true)
}

fn op_l_with(tr: &Transform, nu: f64, u: &VectorField, dv: &Derivs, second_order: bool) -> VectorField {
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    for (p, g) in tr.nodes.iter().enumerate() {
        for i in 0..D {
            let mut acc = 0.0;
            for k in 0..D {
                for l in 0..D {
                    if second_order {
                        for m in 0..D {
                            let mut c = 0.0;
                            for j in 0..D {
                                c += g.det * g.a[i][k] * g.dy[m][j] * g.dy[l][j] - dl(i, k) * dl(m, j) * dl(j, l);
                                c += g.det * g.a[j][k] * g.dy[m][i] * g.dy[l][j] - dl(j, k) * dl(m, i) * dl(j, l);
                            }
                            acc += nu * c * dv.d2[k][l][m][p];
                        }
                    }
                    let mut c1 = 0.0;
                    for j in 0..D {
                        c1 += g.da[i][k][j] * g.dy[l][j] + g.da[j][k][i] * g.dy[l][j];
                        c1 += g.da[i][k][j] * g.dy[l][j]
                            + g.a[i][k] * g.d2y[l][j][j]
                            + g.da[j][k][j] * g.dy[l][i]
                            + g.a[j][k] * g.d2y[l][j][i];
                    }
                    acc += g.det * nu * c1 * dv.d1[k][l][p];
                }
                let mut c0 = 0.0;
                for j in 0..D {
                    c0 += g.d2a[i][k][j][j] + g.d2a[j][k][j][i];
                }
                acc += g.det * nu * c0 * u[k][p];
            }
            out[i][p] = acc;
        }
    }
    out
}

/// `-nu L_eta u`, i.e. the pulled-back viscous term; equals `-nu Delta u` when `eta = eta^S`.
pub fn op_l_full(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField) -> VectorField {
    let dv = derivs(domain, u);
    let defect = op_l_with(tr, nu, u, &dv, true);
    let mut out = zeros_v(tr.nodes.len());
    for i in 0..D {
        for p in 0..tr.nodes.len() {
            out[i][p] = -nu * (dv.d2[i][0][0][p] + dv.d2[i][1][1][p]) - defect[i][p];
        }
    }
    out
}

/// `(grad - G_eta) p = (I - b) grad p`.
pub fn op_g(domain: &ReferenceDomain, tr: &Transform, p: &[f64]) -> VectorField {
    let gp = domain.grad(p);
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    for (q, g) in tr.nodes.iter().enumerate() {
        for i in 0..D {
            out[i][q] = (0..D)
                .map(|k| {
                    let b = g.det * g.dy[k][i];
                    (if i == k { 1.0 } else { 0.0 } - b) * gp[k][q]
                })
                .sum();
        }
    }
    out
}

/// `M_eta u`, driven by the plate velocity stored in the transform.
pub fn op_m(domain: &ReferenceDomain, tr: &Transform, u: &VectorField) -> VectorField {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    for (p, ng) in tr.nodes.iter().enumerate() {
        for i in 0..D {
            let mut acc = 0.0;
            for k in 0..D {
                for l in 0..D {
                    acc -= ng.det * ng.a[i][k] * g[k][l][p] * ng.dty[l];
                }
                acc -= ng.det * ng.dta[i][k] * u[k][p];
            }
            out[i][p] = acc;
        }
    }
    out
}

/// `N_eta u`, the pulled-back convection `-(U.grad)U`.
pub fn op_n(domain: &ReferenceDomain, tr: &Transform, u: &VectorField) -> VectorField {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    for (p, ng) in tr.nodes.iter().enumerate() {
        for i in 0..D {
            let mut acc = 0.0;
            for k in 0..D {
                for l in 0..D {
                    for j in 0..D {
                        acc -= ng.det * ng.a[k][l] * ng.da[i][j][k] * u[l][p] * u[j][p];
                        for m in 0..D {
                            acc -= ng.det * ng.a[k][l] * ng.a[i][j] * ng.dy[m][k] * u[l][p] * g[j][m][p];
                        }
                    }
                }
            }
            out[i][p] = acc;
        }
    }
    out
}

/// `(a . grad) b` on the reference grid.
pub fn convection(domain: &ReferenceDomain, a: &VectorField, b: &VectorField) -> VectorField {
    let g = [domain.grad(&b[0]), domain.grad(&b[1])];
    let n = domain.len();
    let mut out = zeros_v(n);
    for i in 0..D {
        for p in 0..n {
            out[i][p] = a[0][p] * g[i][0][p] + a[1][p] * g[i][1][p];
        }
    }
    out
}

/// Coefficients of `E_im = C1[i][m][k][l] du_k/dy_l + C0[i][m][k] u_k` at one node.
fn e_coefficients(g: &NodeGeom, nu: f64, form: EForm) -> ([[[[f64; 2]; 2]; 2]; 2], [[[f64; 2]; 2]; 2]) {
    let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut c1 = [[[[0.0; 2]; 2]; 2]; 2];
    let mut c0 = [[[0.0; 2]; 2]; 2];
    for i in 0..D {
        for m in 0..D {
            for k in 0..D {
                for l in 0..D {
                    let mut c = 0.0;
                    for j in 0..D {
                        c += g.det * g.a[i][k] * g.dy[m][j] * g.dy[l][j];
                        c += match form {
                            EForm::Piola => g.det * g.a[j][k] * g.dy[l][i] * g.dy[m][j],
                            EForm::Literal => g.det * g.a[j][k] * g.dy[m][i] * g.dy[l][j],
                        };
                    }
                    c -= dl(i, k) * dl(m, l);
                    c -= match form {
                        EForm::Piola => dl(k, m) * dl(l, i),
                        EForm::Literal => dl(k, l) * dl(m, i),
                    };
                    c1[i][m][k][l] = nu * c;
                }
                let mut c = 0.0;
                for j in 0..D {
                    c += (g.da[i][k][j] + g.da[j][k][i]) * g.dy[m][j];
                }
                c0[i][m][k] = nu * g.det * c;
            }
        }
    }
    (c1, c0)
}

/// `y`-derivatives of the `E` coefficients, `dc1[n][i][m][k][l] = d C1[i][m][k][l] / dy_n`.
#[allow(clippy::type_complexity)]
fn e_coefficient_derivatives(
    g: &NodeGeom,
    nu: f64,
    form: EForm,
) -> ([[[[[f64; 2]; 2]; 2]; 2]; 2], [[[[f64; 2]; 2]; 2]; 2]) {
    // derivative of a composed coefficient f(X(y)) along y_n
    let chain = |grad_x: [f64; 2], n: usize| grad_x[0] * g.dx[0][n] + grad_x[1] * g.dx[1][n];
    let mut dc1 = [[[[[0.0; 2]; 2]; 2]; 2]; 2];
    let mut dc0 = [[[[0.0; 2]; 2]; 2]; 2];
    for n in 0..D {
        let da_n = |i: usize, k: usize| chain([g.da[i][k][0], g.da[i][k][1]], n);
        let ddy_n = |m: usize, j: usize| chain([g.d2y[m][j][0], g.d2y[m][j][1]], n);
        let dda_n = |i: usize, k: usize, j: usize| chain([g.d2a[i][k][j][0], g.d2a[i][k][j][1]], n);
        let dd = g.ddet[n];
        for i in 0..D {
            for m in 0..D {
                for k in 0..D {
                    for l in 0..D {
                        let mut c = 0.0;
                        for j in 0..D {
                            // det * a_ik * Y_m,j * Y_l,j
                            c += dd * g.a[i][k] * g.dy[m][j] * g.dy[l][j]
                                + g.det * da_n(i, k) * g.dy[m][j] * g.dy[l][j]
                                + g.det * g.a[i][k] * ddy_n(m, j) * g.dy[l][j]
                                + g.det * g.a[i][k] * g.dy[m][j] * ddy_n(l, j);
                            let (p, q, r, s) = match form {
                                EForm::Piola => (l, i, m, j),
                                EForm::Literal => (m, i, l, j),
                            };
                            // det * a_jk * Y_p,q * Y_r,s
                            c += dd * g.a[j][k] * g.dy[p][q] * g.dy[r][s]
                                + g.det * da_n(j, k) * g.dy[p][q] * g.dy[r][s]
                                + g.det * g.a[j][k] * ddy_n(p, q) * g.dy[r][s]
                                + g.det * g.a[j][k] * g.dy[p][q] * ddy_n(r, s);
                        }
                        dc1[n][i][m][k][l] = nu * c;
                    }
                    let mut c = 0.0;
                    for j in 0..D {
                        let s = g.da[i][k][j] + g.da[j][k][i];
                        let ds = dda_n(i, k, j) + dda_n(j, k, i);
                        c += dd * s * g.dy[m][j] + g.det * ds * g.dy[m][j] + g.det * s * ddy_n(m, j);
                    }
                    dc0[n][i][m][k] = nu * c;
                }
            }
        }
    }
    (dc1, dc0)
}

pub fn op_e_form(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField, form: EForm) -> MatrixField {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let n = tr.nodes.len();
    let mut e = zeros_m(n);
    for (p, ng) in tr.nodes.iter().enumerate() {
        let (c1, c0) = e_coefficients(ng, nu, form);
        for i in 0..D {
            for m in 0..D {
                let mut acc = 0.0;
                for k in 0..D {
                    for l in 0..D {
                        acc += c1[i][m][k][l] * g[k][l][p];
                    }
                    acc += c0[i][m][k] * u[k][p];
                }
                e[i][m][p] = acc;
            }
        }
    }
    e
}

/// `E_eta(u)`, Piola-consistent form.
pub fn op_e(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField) -> MatrixField {
    op_e_form(domain, tr, nu, u, EForm::Piola)
}

/// `F^1_eta(u)` with `div E_eta(u) = -nu (Delta - L_eta) u + F^1_eta(u)`; first order in `u`.
pub fn op_f1_form(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField, form: EForm) -> VectorField {
    let dv = derivs(domain, u);
    let lower = op_l_with(tr, nu, u, &dv, false);
    let n = tr.nodes.len();
    let mut out = zeros_v(n);
    for (p, ng) in tr.nodes.iter().enumerate() {
        let (_, c0) = e_coefficients(ng, nu, form);
        let (dc1, dc0) = e_coefficient_derivatives(ng, nu, form);
        for i in 0..D {
            let mut acc = 0.0;
            for m in 0..D {
                for k in 0..D {
                    for l in 0..D {
                        acc += dc1[m][i][m][k][l] * dv.d1[k][l][p];
                    }
                    acc += dc0[m][i][m][k] * u[k][p] + c0[i][m][k] * dv.d1[k][m][p];
                }
            }
            out[i][p] = acc - lower[i][p];
        }
    }
    out
}

pub fn op_f1(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField) -> VectorField {
    op_f1_form(domain, tr, nu, u, EForm::Piola)
}

/// The plate-side correction `H(u, eta)` (mean-zero).
pub fn plate_force_h(domain: &ReferenceDomain, tr: &Transform, nu: f64, u: &VectorField) -> PlateProfile {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let nx = domain.nx();
    let iz = domain.nz() - 1;
    let eta_s_x = &domain.rho1_s;
    let eta_x = tr.eta.derivative(&[1]);
    let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let v = (0..nx)
        .map(|ix| {
            let p = domain.idx(ix, iz);
            let ng = &tr.nodes[p];
            let nt = [-eta_x[ix], 1.0];
            let nr = [-eta_s_x[ix], 1.0];
            let mut acc = 0.0;
            for j in 0..D {
                for k in 0..D {
                    acc -= (ng.da[1][k][j] + ng.da[j][k][1]) * nt[j] * u[k][p];
                    for l in 0..D {
                        let c = dl(1, k) * dl(j, l) * nr[j] - ng.a[1][k] * ng.dy[l][j] * nt[j]
                            + dl(1, l) * dl(j, k) * nr[j]
                            - ng.a[j][k] * ng.dy[l][1] * nt[j];
                        acc += c * g[k][l][p];
                    }
                }
            }
            nu * acc
        })
        .collect();
    PlateProfile { grid: domain.grid.clone(), values: v, mean_zero: false }.project_mean_zero()
}

/// `T*(zeta) = M(sqrt(1+|grad eta^S|^2) zeta . e_3)` for a vector field on the top boundary.
pub fn t_star(domain: &ReferenceDomain, top: &[[f64; 2]]) -> PlateProfile {
    let v = top.iter().enumerate().map(|(ix, z)| (1.0 + domain.rho1_s[ix].powi(2)).sqrt() * z[1]).collect();
    PlateProfile { grid: domain.grid.clone(), values: v, mean_zero: false }.project_mean_zero()
}

/// Top-boundary trace of `m n` for a matrix field (reference unit normal).
pub fn matrix_normal_top(domain: &ReferenceDomain, m: &MatrixField) -> Vec<[f64; 2]> {
    let iz = domain.nz() - 1;
    (0..domain.nx())
        .map(|ix| {
            let p = domain.idx(ix, iz);
            let big_n = [-domain.rho1_s[ix], 1.0];
            let len = (big_n[0] * big_n[0] + 1.0).sqrt();
            let nn = [big_n[0] / len, big_n[1] / len];
            [m[0][0][p] * nn[0] + m[0][1][p] * nn[1], m[1][0][p] * nn[0] + m[1][1][p] * nn[1]]
        })
        .collect()
}

pub fn matrix_normal_bottom(domain: &ReferenceDomain, m: &MatrixField) -> Vec<[f64; 2]> {
    (0..domain.nx())
        .map(|ix| {
            let p = domain.idx(ix, 0);
            [-m[0][1][p], -m[1][1][p]]
        })
        .collect()
}

/// Tangential vector fields on the two boundary components.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    pub top: Vec<[f64; 2]>,
    pub bottom: Vec<[f64; 2]>,
}

impl BoundaryField {
    pub fn zero(nx: usize) -> Self {
        Self { top: vec![[0.0; 2]; nx], bottom: vec![[0.0; 2]; nx] }
    }

    pub fn norm(&self) -> f64 {
        self.top.iter().chain(&self.bottom).map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>().sqrt()
    }

    fn flat(&self) -> Vec<f64> {
        self.top.iter().chain(&self.bottom).flat_map(|v| v.iter().copied()).collect()
    }

    fn unflat(v: &[f64], nx: usize) -> Self {
        let get = |o: usize| (0..nx).map(|i| [v[o + 2 * i], v[o + 2 * i + 1]]).collect();
        Self { top: get(0), bottom: get(2 * nx) }
    }

    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        let f = |x: &Vec<[f64; 2]>, y: &Vec<[f64; 2]>| {
            x.iter().zip(y).map(|(p, q)| [p[0] + a * q[0], p[1] + a * q[1]]).collect()
        };
        Self { top: f(&self.top, &other.top), bottom: f(&self.bottom, &other.bottom) }
    }

    /// Tangential part relative to the reference normals.
    pub fn tangential(&self, domain: &ReferenceDomain) -> Self {
        let top = self
            .top
            .iter()
            .enumerate()
            .map(|(ix, v)| {
                let big_n = [-domain.rho1_s[ix], 1.0];
                let n2 = big_n[0] * big_n[0] + 1.0;
                let c = (v[0] * big_n[0] + v[1] * big_n[1]) / n2;
                [v[0] - c * big_n[0], v[1] - c * big_n[1]]
            })
            .collect();
        let bottom = self.bottom.iter().map(|v| [v[0], 0.0]).collect();
        Self { top, bottom }
    }
}

/// The operators `W`, `V` and the tangential lift `G` on both boundary components.
#[derive(Clone, Debug)]
pub struct BoundaryOps {
    pub w_top: Vec<[f64; 2]>,
    pub w_bottom: Vec<[f64; 2]>,
    pub v_top: Vec<f64>,
    pub v_bottom: Vec<f64>,
    pub g: BoundaryField,
}

pub fn boundary_ops(domain: &ReferenceDomain, tr: &Transform, physics: &Physics, u: &VectorField) -> BoundaryOps {
    let g = [domain.grad(&u[0]), domain.grad(&u[1])];
    let nx = domain.nx();
    let eta_x = tr.eta.derivative(&[1]);
    let xi_t = &tr.xi_t.values;
    let nu = physics.nu;
    let mut out = BoundaryOps {
        w_top: Vec::with_capacity(nx),
        w_bottom: Vec::with_capacity(nx),
        v_top: Vec::with_capacity(nx),
        v_bottom: Vec::with_capacity(nx),
        g: BoundaryField::zero(nx),
    };
    for top in [true, false] {
        for ix in 0..nx {
            let iz = if top { domain.nz() - 1 } else { 0 };
            let p = domain.idx(ix, iz);
            let ng = &tr.nodes[p];
            let (beta, nt, n_ref, tau, tau_t, tdt) = if top {
                let nn = [-eta_x[ix], 1.0];
                let ln = (nn[0] * nn[0] + 1.0).sqrt();
                let nr = [-domain.rho1_s[ix], 1.0];
                let lr = (nr[0] * nr[0] + 1.0).sqrt();
                (
                    physics.beta2,
                    [nn[0] / ln, nn[1] / ln],
                    [nr[0] / lr, nr[1] / lr],
                    [1.0, domain.rho1_s[ix]],
                    [1.0, eta_x[ix]],
                    [0.0, xi_t[ix]],
                )
            } else {
                (physics.beta1, [0.0, -1.0], [0.0, -1.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0])
            };
            let uu = [u[0][p], u[1][p]];
            let mut w = [0.0; 2];
            for k in 0..D {
                let mut acc = 0.0;
                for j in 0..D {
                    for m in 0..D {
                        acc += nu * nt[j] * (ng.da[k][m][j] + ng.da[j][m][k]) * uu[m];
                        for q in 0..D {
                            acc += nu
                                * nt[j]
                                * (ng.a[k][m] * g[m][q][p] * ng.dy[q][j] + ng.a[j][m] * g[m][q][p] * ng.dy[q][k]);
                        }
                    }
                }
                let au: f64 = (0..D).map(|j| ng.a[k][j] * uu[j]).sum();
                acc += beta * (au - tdt[k]);
                w[k] = acc;
            }
            // 2 nu D(u) n + beta (u - T xi_t) in the reference frame
            let mut s = [0.0; 2];
            for k in 0..D {
                s[k] = (0..D).map(|j| nu * (g[k][j][p] + g[j][k][p]) * n_ref[j]).sum::<f64>() + beta * (uu[k] - tdt[k]);
            }
            let v = (0..D).map(|k| s[k] * (tau[k] - tau_t[k]) + (s[k] - w[k]) * tau_t[k]).sum::<f64>();
            let n2 = tau[0] * tau[0] + tau[1] * tau[1];
            if top {
                out.w_top.push(w);
                out.v_top.push(v);
                out.g.top[ix] = [v * tau[0] / n2, v * tau[1] / n2];
            } else {
                out.w_bottom.push(w);
                out.v_bottom.push(v);
                out.g.bottom[ix] = [v, 0.0];
            }
        }
    }
    out
}

/// Full transformed momentum right-hand side `F(u, p, xi)` of the perturbation system.
pub struct Perturbation<'a> {
    pub u: &'a VectorField,
    pub p: &'a [f64],
    pub u_t: &'a VectorField,
    pub xi: &'a PlateProfile,
    pub xi_t: &'a PlateProfile,
}

pub fn f_full(st: &StationaryState, pert: &Perturbation) -> Result<VectorField> {
    let dom = &st.domain;
    let eta = dom.eta_s.add(pert.xi, 1.0);
    let tr = Transform::new(dom, &eta, Some(pert.xi_t))?;
    let n = dom.len();
    let ut = axpy_v(1.0, pert.u, &st.w);
    let pt: Vec<f64> = pert.p.iter().zip(&st.p).map(|(a, b)| a + b).collect();
    let ku = op_k(&tr, pert.u_t);
    let mut f = axpy_v(-1.0, &ku, pert.u_t);
    let terms = [
        op_l(dom, &tr, st.physics.nu, &ut),
        op_g(dom, &tr, &pt),
        op_m(dom, &tr, &ut),
        op_n(dom, &tr, &ut),
        convection(dom, pert.u, &st.w),
        convection(dom, &st.w, pert.u),
        convection(dom, &st.w, &st.w),
    ];
    for t in &terms {
        f = axpy_v(1.0, t, &f);
    }
    if let Some(fs) = &st.forcing {
        let pts = dom.points();
        for (q, y) in pts.iter().enumerate() {
            let ng = &tr.nodes[q];
            let x = [y[0], y[1] * ng.det];
            let (fx, _) = fs(x);
            let (fy, _) = fs(*y);
            for i in 0..D {
                f[i][q] += ng.det * fx[i] - fy[i];
            }
        }
    }
    debug_assert_eq!(f[0].len(), n);
    Ok(f)
}

/// Central differences with one Richardson step; `f` maps a scalar step to a flat vector.
pub fn gateaux(f: impl Fn(f64) -> Result<Vec<f64>>, h: f64) -> Result<Vec<f64>> {
    let fp = f(h)?;
    let fm = f(-h)?;
    let fp2 = f(0.5 * h)?;
    let fm2 = f(-0.5 * h)?;
    let d1: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let d2: Vec<f64> = fp2.iter().zip(&fm2).map(|(a, b)| (a - b) / h).collect();
    let r: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| (4.0 * b - a) / 3.0).collect();
    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = r.iter().zip(&d2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = fp.iter().chain(&fm).fold(0.0f64, |m, v| m.max(v.abs())) * (fp.len() as f64).sqrt();
    let roundoff = 1e-11 * scale / h;
    if diff > roundoff && diff > 1e-6 * nr {
        return Err(FsiError::IllConditioned { rel: diff / nr.max(f64::MIN_POSITIVE) });
    }
    Ok(r)
}

/// Step of order `1e-4` relative to the `C^2` size of the direction: the maps depend on
/// `xi` through its first two derivatives as well.
fn step_for(xi: &PlateProfile, xi_t: Option<&PlateProfile>) -> f64 {
    let size = |p: &PlateProfile| {
        let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        amax(&p.values).max(amax(&p.derivative(&[1]))).max(amax(&p.derivative(&[2])))
    };
    let m = size(xi).max(xi_t.map(size).unwrap_or(0.0));
    if m > 0.0 {
        3e-4 / m
    } else {
        1.0
    }
}

/// `L^1(xi) = d/dh E_{eta^S + h xi}(w^S)`.
pub fn linearize_l1(st: &StationaryState, xi: &PlateProfile) -> Result<MatrixField> {
    let dom = &st.domain;
    let n = dom.len();
    let r = gateaux(
        |h| {
            let tr = Transform::new(dom, &dom.eta_s.add(xi, h), None)?;
            Ok(flat_m(&op_e(dom, &tr, st.physics.nu, &st.w)))
        },
        step_for(xi, None),
    )?;
    Ok(unflat_m(&r, n))
}

/// The part of `F(0, 0, xi)` that is not the divergence of `E_eta(w^S)`.
pub fn fluid_rest(st: &StationaryState, xi: &PlateProfile, xi_t: &PlateProfile) -> Result<VectorField> {
    let dom = &st.domain;
    let n = dom.len();
    let z = zeros_v(n);
    let zp = vec![0.0; n];
    let f = f_full(st, &Perturbation { u: &z, p: &zp, u_t: &z, xi, xi_t })?;
    let tr = Transform::new(dom, &dom.eta_s.add(xi, 1.0), None)?;
    let de = divergence_m(dom, &op_e(dom, &tr, st.physics.nu, &st.w));
    Ok(axpy_v(-1.0, &de, &f))
}

/// `L^2(xi, xi_t)`, signed so that the linearized momentum equation reads
/// `u_t - div T(u,p) + Oseen(u) - div L^1(xi) + L^2(xi, xi_t) = ...`.
pub fn linearize_l2(st: &StationaryState, xi: &PlateProfile, xi_t: &PlateProfile) -> Result<VectorField> {
    let n = st.domain.len();
    let r = gateaux(|h| Ok(flat_v(&fluid_rest(st, &xi.scaled(h), &xi_t.scaled(h))?)), step_for(xi, Some(xi_t)))?;
    Ok(scale_v(-1.0, &unflat_v(&r, n)))
}

fn boundary_g(
    st: &StationaryState,
    u: &VectorField,
    eta: &PlateProfile,
    xi_t: Option<&PlateProfile>,
) -> Result<BoundaryField> {
    let tr = Transform::new(&st.domain, eta, xi_t)?;
    Ok(boundary_ops(&st.domain, &tr, &st.physics, u).g)
}

/// `L^3(xi)`, tangential, with `G(w^S, eta^S + xi) = -[L^1(xi) n + L^3(xi)]_tau + O(xi^2)`.
pub fn linearize_l3(st: &StationaryState, xi: &PlateProfile) -> Result<BoundaryField> {
    let dom = &st.domain;
    let nx = dom.nx();
    let r = gateaux(|h| Ok(boundary_g(st, &st.w, &dom.eta_s.add(xi, h), None)?.flat()), step_for(xi, None))?;
    let dg = BoundaryField::unflat(&r, nx);
    let l1 = linearize_l1(st, xi)?;
    let l1n = BoundaryField { top: matrix_normal_top(dom, &l1), bottom: matrix_normal_bottom(dom, &l1) };
    let mut out = dg.axpy(1.0, &l1n).tangential(dom);
    for v in out.top.iter_mut().chain(out.bottom.iter_mut()) {
        v[0] = -v[0];
        v[1] = -v[1];
    }
    Ok(out)
}

/// All linear parts for one direction `(xi, xi_t)`.
pub struct Linearization {
    pub l1: MatrixField,
    pub l2: VectorField,
    pub l3: BoundaryField,
}

pub fn linearize(st: &StationaryState, xi: &PlateProfile, xi_t: &PlateProfile) -> Result<Linearization> {
    Ok(Linearization { l1: linearize_l1(st, xi)?, l2: linearize_l2(st, xi, xi_t)?, l3: linearize_l3(st, xi)? })
}

/// The individual quadratic remainders.
#[derive(Clone, Debug)]
pub struct Remainders {
    pub n_e: MatrixField,
    pub n_f: VectorField,
    pub n_g: BoundaryField,
    pub f_cal: VectorField,
    pub h: PlateProfile,
    pub g: BoundaryField,
}

/// Right-hand side triple of the perturbation system.
#[derive(Clone, Debug)]
pub struct NonlinearResidual {
    pub interior: VectorField,
    pub boundary: BoundaryField,
    pub plate: PlateProfile,
}

impl NonlinearResidual {
    pub fn norm(&self) -> f64 {
        (norm_v(&self.interior).powi(2)
            + self.boundary.norm().powi(2)
            + self.plate.values.iter().map(|v| v * v).sum::<f64>())
        .sqrt()
    }
}

pub fn remainders(st: &StationaryState, pert: &Perturbation, lin: &Linearization) -> Result<Remainders> {
    let dom = &st.domain;
    let n = dom.len();
    let eta = dom.eta_s.add(pert.xi, 1.0);
    let tr = Transform::new(dom, &eta, Some(pert.xi_t))?;
    let nu = st.physics.nu;
    let e = op_e(dom, &tr, nu, &st.w);
    let n_e = unflat_m(&flat_m(&e).iter().zip(flat_m(&lin.l1)).map(|(a, b)| a - b).collect::<Vec<_>>(), n);
    let n_f = axpy_v(1.0, &lin.l2, &fluid_rest(st, pert.xi, pert.xi_t)?);
    let z = zeros_v(n);
    let zp = vec![0.0; n];
    let f_all = f_full(st, pert)?;
    let f0 = f_full(st, &Perturbation { u: &z, p: &zp, u_t: &z, xi: pert.xi, xi_t: pert.xi_t })?;
    let f_cal = axpy_v(-1.0, &f0, &f_all);
    let h = plate_force_h(dom, &tr, nu, pert.u);
    let gw = boundary_g(st, &st.w, &eta, None)?;
    let l1n = BoundaryField { top: matrix_normal_top(dom, &lin.l1), bottom: matrix_normal_bottom(dom, &lin.l1) };
    let nen = BoundaryField { top: matrix_normal_top(dom, &n_e), bottom: matrix_normal_bottom(dom, &n_e) };
    let n_g = gw.axpy(1.0, &l1n.tangential(dom)).axpy(1.0, &lin.l3).axpy(1.0, &nen.tangential(dom)).tangential(dom);
    let ut = axpy_v(1.0, pert.u, &st.w);
    let g = boundary_ops(dom, &tr, &st.physics, &ut).g.axpy(-1.0, &gw);
    Ok(Remainders { n_e, n_f, n_g, f_cal, h, g })
}

/// Assembles the triple driving the perturbation system from the remainders.
pub fn residual_from(st: &StationaryState, r: &Remainders) -> NonlinearResidual {
    let dom = &st.domain;
    let interior = axpy_v(1.0, &divergence_m(dom, &r.n_e), &axpy_v(1.0, &r.n_f, &r.f_cal));
    let nen = BoundaryField { top: matrix_normal_top(dom, &r.n_e), bottom: matrix_normal_bottom(dom, &r.n_e) };
    let boundary = r.n_g.axpy(-1.0, &nen.tangential(dom)).axpy(1.0, &r.g);
    let tn = t_star(dom, &matrix_normal_top(dom, &r.n_e));
    let plate = r.h.add(&tn, -1.0).project_mean_zero();
    NonlinearResidual { interior, boundary, plate }
}

pub fn nonlinear_remainder(st: &StationaryState, pert: &Perturbation) -> Result<NonlinearResidual> {
    let lin = linearize(st, pert.xi, pert.xi_t)?;
    Ok(residual_from(st, &remainders(st, pert, &lin)?))
}

/// `det(grad X) f^S(X) - f^S` and its announced linear part
/// `xi/(1+eta^S) f^S + theta xi d f^S/dy_3`, `theta = y_3/(1+eta^S)`.
pub fn forcing_taylor(st: &StationaryState, xi: &PlateProfile) -> Result<(VectorField, VectorField)> {
    let dom = &st.domain;
    let fs = st.forcing.as_ref().ok_or_else(|| FsiError::Transform("no stationary forcing".into()))?;
    let tr = Transform::new(dom, &dom.eta_s.add(xi, 1.0), None)?;
    let n = dom.len();
    let mut full = zeros_v(n);
    let mut lin = zeros_v(n);
    for (q, y) in dom.points().iter().enumerate() {
        let ix = q / dom.nz();
        let ng = &tr.nodes[q];
        let (fx, _) = fs([y[0], y[1] * ng.det]);
        let (fy, gy) = fs(*y);
        let r1 = dom.rho1[ix];
        let theta = y[1] / r1;
        for i in 0..D {
            full[i][q] = ng.det * fx[i] - fy[i];
            lin[i][q] = xi.values[ix] / r1 * fy[i] + theta * xi.values[ix] * gy[i][1];
        }
    }
    Ok((full, lin))
}
