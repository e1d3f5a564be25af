//! Domains `Omega(eta) = {(s, y3): 0 < y3 < 1 + eta(s)}` over a horizontal torus,
//! the vertical-stretch maps between them, Piola transport of velocity fields,
//! boundary frames and the fluid force on the plate.

use crate::error::{FsiError, Result};
use crate::numerics::{
    self, bary_diff_matrix, dft, fourier_derivative, gauss_lobatto, periodic_nodes, to_unit_interval,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Smallest admissible value of `1 + eta`.
pub const ADMISSIBILITY: f64 = 1e-6;

/// Horizontal periodic grid. `dim` is the dimension of the fluid domain, so
/// the torus itself has dimension `dim - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusGrid {
    pub dim: usize,
    pub periods: Vec<f64>,
    pub n_modes: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, periods: &[f64], n_modes: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(FsiError::Geometry(format!("dim must be 2 or 3, got {dim}")));
        }
        if periods.len() != dim - 1 || periods.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(FsiError::Geometry("periods must be positive, one per horizontal direction".into()));
        }
        if n_modes < 4 || !n_modes.is_multiple_of(2) {
            return Err(FsiError::Geometry(format!("n_modes must be even and >= 4, got {n_modes}")));
        }
        Ok(Self { dim, periods: periods.to_vec(), n_modes })
    }

    pub fn line(l1: f64, n_modes: usize) -> Result<Self> {
        Self::new(2, &[l1], n_modes)
    }

    pub fn horizontal_dim(&self) -> usize {
        self.dim - 1
    }

    pub fn len(&self) -> usize {
        self.n_modes.pow(self.horizontal_dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Horizontal coordinates of node `idx` (row-major when the torus is 2D).
    pub fn node(&self, idx: usize) -> Vec<f64> {
        let n = self.n_modes;
        match self.horizontal_dim() {
            1 => vec![self.periods[0] * idx as f64 / n as f64],
            _ => {
                let (i, j) = (idx / n, idx % n);
                vec![self.periods[0] * i as f64 / n as f64, self.periods[1] * j as f64 / n as f64]
            }
        }
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn area(&self) -> f64 {
        self.periods.iter().product()
    }
}

/// Scalar field on the torus, stored by its nodal values.
#[derive(Clone, Debug)]
pub struct PlateProfile {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
    pub mean_zero: bool,
}

impl PlateProfile {
    pub fn from_values(grid: &TorusGrid, values: Vec<f64>, mean_zero: bool) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FsiError::Resolution(format!(
                "profile has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FsiError::Geometry("non-finite profile value".into()));
        }
        let p = Self { grid: grid.clone(), values, mean_zero };
        if mean_zero {
            let scale = p.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if p.mean().abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) && scale > 0.0 {
                return Err(FsiError::Geometry(format!("profile flagged mean-zero has mean {:.3e}", p.mean())));
            }
        }
        Ok(p)
    }

    pub fn from_fn(grid: &TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.nodes().iter().map(|s| f(s)).collect();
        Self { grid: grid.clone(), values, mean_zero: false }
    }

    pub fn constant(grid: &TorusGrid, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.len()], mean_zero: c == 0.0 }
    }

    pub fn zero(grid: &TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// The projection `M` onto mean-zero profiles.
    pub fn project_mean_zero(&self) -> Self {
        let m = self.mean();
        Self { grid: self.grid.clone(), values: self.values.iter().map(|v| v - m).collect(), mean_zero: true }
    }

    pub fn min_thickness(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(1.0 + v))
    }

    pub fn check_admissible(&self) -> Result<()> {
        let min = self.min_thickness();
        if !(min >= ADMISSIBILITY) {
            return Err(FsiError::InadmissibleProfile { min });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self, scale: f64) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + scale * b).collect();
        Self { grid: self.grid.clone(), values, mean_zero: self.mean_zero && other.mean_zero }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|v| a * v).collect(), mean_zero: self.mean_zero }
    }

    /// Nodal values of the mixed derivative with `orders[k]` derivatives along axis `k`.
    pub fn derivative(&self, orders: &[u32]) -> Vec<f64> {
        let n = self.grid.n_modes;
        match self.grid.horizontal_dim() {
            1 => fourier_derivative(&self.values, self.grid.periods[0], orders[0]),
            _ => {
                let mut v = self.values.clone();
                if orders[0] > 0 {
                    for j in 0..n {
                        let col: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
                        let d = fourier_derivative(&col, self.grid.periods[0], orders[0]);
                        for i in 0..n {
                            v[i * n + j] = d[i];
                        }
                    }
                }
                if orders[1] > 0 {
                    for i in 0..n {
                        let d = fourier_derivative(&v[i * n..(i + 1) * n], self.grid.periods[1], orders[1]);
                        v[i * n..(i + 1) * n].copy_from_slice(&d);
                    }
                }
                v
            }
        }
    }

    /// Trigonometric interpolant (or a derivative of it) evaluated off-grid.
    pub fn eval(&self, s: &[f64], orders: &[u32]) -> f64 {
        let n = self.grid.n_modes;
        match self.grid.horizontal_dim() {
            1 => numerics::trig_interp(&dft(&self.values), self.grid.periods[0], s[0], orders[0]),
            _ => {
                // interpolate along axis 1 for every row, then along axis 0
                let row_vals: Vec<f64> = (0..n)
                    .map(|i| {
                        let c = dft(&self.values[i * n..(i + 1) * n]);
                        numerics::trig_interp(&c, self.grid.periods[1], s[1], orders[1])
                    })
                    .collect();
                numerics::trig_interp(&dft(&row_vals), self.grid.periods[0], s[0], orders[0])
            }
        }
    }

    /// Horizontal gradient at an arbitrary point.
    pub fn gradient_at(&self, s: &[f64]) -> Vec<f64> {
        match self.grid.horizontal_dim() {
            1 => vec![self.eval(s, &[1])],
            _ => vec![self.eval(s, &[1, 0]), self.eval(s, &[0, 1])],
        }
    }

    /// CSV rows `node,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v:?}");
        }
        out
    }

    /// Fourier coefficient list `mode,real,imag` (1D torus) or `k1,k2,real,imag` (2D torus).
    pub fn fourier_csv(&self) -> String {
        let n = self.grid.n_modes;
        let signed = |k: usize| if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
        let mut out = String::new();
        match self.grid.horizontal_dim() {
            1 => {
                out.push_str("mode,real,imag\n");
                for (k, c) in dft(&self.values).iter().enumerate() {
                    let _ = writeln!(out, "{},{:?},{:?}", signed(k), c.re, c.im);
                }
            }
            _ => {
                out.push_str("k1,k2,real,imag\n");
                let c = dft2(&self.values, n);
                for k1 in 0..n {
                    for k2 in 0..n {
                        let z = c[k1 * n + k2];
                        let _ = writeln!(out, "{},{},{:?},{:?}", signed(k1), signed(k2), z.re, z.im);
                    }
                }
            }
        }
        out
    }

    pub fn from_fourier_1d(grid: &TorusGrid, coeffs: &[(i64, f64, f64)]) -> Result<Self> {
        if grid.horizontal_dim() != 1 {
            return Err(FsiError::Geometry("1D coefficient list on a 2D torus".into()));
        }
        let l = grid.periods[0];
        let f = |s: &[f64]| {
            coeffs
                .iter()
                .map(|&(k, re, im)| {
                    let ph = 2.0 * PI * k as f64 * s[0] / l;
                    re * ph.cos() - im * ph.sin()
                })
                .sum::<f64>()
        };
        Ok(Self::from_fn(grid, f))
    }
}

fn dft2(values: &[f64], n: usize) -> Vec<Complex64> {
    let mut rows: Vec<Complex64> = Vec::with_capacity(n * n);
    for i in 0..n {
        rows.extend(dft(&values[i * n..(i + 1) * n]));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for k2 in 0..n {
        for k1 in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let ph = -2.0 * PI * (k1 * i) as f64 / n as f64;
                acc += rows[i * n + k2] * Complex64::new(ph.cos(), ph.sin());
            }
            out[k1 * n + k2] = acc / n as f64;
        }
    }
    out
}

fn check_pair(eta1: &PlateProfile, eta2: &PlateProfile, y: &[f64]) -> Result<()> {
    eta1.check_admissible()?;
    eta2.check_admissible()?;
    if eta1.grid != eta2.grid {
        return Err(FsiError::Resolution("profiles live on different grids".into()));
    }
    if y.len() != eta1.grid.dim {
        return Err(FsiError::Geometry(format!("point has {} coordinates, expected {}", y.len(), eta1.grid.dim)));
    }
    Ok(())
}

/// `X_{eta1,eta2}`: `Omega(eta1) -> Omega(eta2)`, stretching the vertical coordinate.
pub fn domain_map(eta1: &PlateProfile, eta2: &PlateProfile, y: &[f64]) -> Result<Vec<f64>> {
    check_pair(eta1, eta2, y)?;
    let d = y.len();
    let s = &y[..d - 1];
    let zero = vec![0; d - 1];
    let r1 = 1.0 + eta1.eval(s, &zero);
    let r2 = 1.0 + eta2.eval(s, &zero);
    let mut x = y.to_vec();
    x[d - 1] = y[d - 1] * r2 / r1;
    Ok(x)
}

/// `grad X_{eta1,eta2}(y)` and its determinant `(1+eta2)/(1+eta1)`.
pub fn map_jacobian(eta1: &PlateProfile, eta2: &PlateProfile, y: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    check_pair(eta1, eta2, y)?;
    let d = y.len();
    let s = &y[..d - 1];
    let zero = vec![0; d - 1];
    let r1 = 1.0 + eta1.eval(s, &zero);
    let r2 = 1.0 + eta2.eval(s, &zero);
    let g1 = eta1.gradient_at(s);
    let g2 = eta2.gradient_at(s);
    let h = r2 / r1;
    let mut j = DMatrix::identity(d, d);
    for k in 0..d - 1 {
        let dh = (g2[k] * r1 - r2 * g1[k]) / (r1 * r1);
        j[(d - 1, k)] = y[d - 1] * dh;
    }
    j[(d - 1, d - 1)] = h;
    let det = j.determinant();
    Ok((j, det))
}

/// Cofactor matrix, `M Cof(M)^T = det(M) I`.
pub fn cofactor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert!(m.is_square() && (n == 2 || n == 3), "cofactor defined for 2x2 and 3x3");
    let mut c = DMatrix::zeros(n, n);
    if n == 2 {
        c[(0, 0)] = m[(1, 1)];
        c[(0, 1)] = -m[(1, 0)];
        c[(1, 0)] = -m[(0, 1)];
        c[(1, 1)] = m[(0, 0)];
        return c;
    }
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            c[(i, j)] = m[(i1, j1)] * m[(i2, j2)] - m[(i1, j2)] * m[(i2, j1)];
        }
    }
    c
}

/// Piola transport of a velocity field.
///
/// `u` lives on `Omega(eta_src)`; the result lives on `Omega(eta_dst)` and is
/// `(Cof grad X)^T U(X(y))` with `X = X_{eta_dst, eta_src}`, i.e. `eta_dst`
/// plays the role of the reference profile and `eta_src` of the deformed one.
pub fn piola_transform(
    u: &dyn Fn(&[f64]) -> Vec<f64>,
    eta_src: &PlateProfile,
    eta_dst: &PlateProfile,
    y: &[f64],
) -> Result<Vec<f64>> {
    let x = domain_map(eta_dst, eta_src, y)?;
    let (j, _) = map_jacobian(eta_dst, eta_src, y)?;
    let ux = u(&x);
    if ux.len() != y.len() {
        return Err(FsiError::Resolution("velocity dimension does not match the domain".into()));
    }
    let cof = cofactor(&j);
    Ok((cof.transpose() * DVector::from_vec(ux)).iter().copied().collect())
}

/// Frame at one top-boundary node.
#[derive(Clone, Debug)]
pub struct NodeFrame {
    pub normal: Vec<f64>,
    pub big_n: Vec<f64>,
    pub tangents: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BoundaryFrame {
    pub top: Vec<NodeFrame>,
    pub bottom: NodeFrame,
}

pub fn boundary_frame(eta: &PlateProfile) -> Result<BoundaryFrame> {
    eta.check_admissible()?;
    let d = eta.grid.dim;
    let grads: Vec<Vec<f64>> = (0..d - 1)
        .map(|k| {
            let mut o = vec![0; d - 1];
            o[k] = 1;
            eta.derivative(&o)
        })
        .collect();
    let top = (0..eta.grid.len())
        .map(|i| {
            let mut big_n = vec![0.0; d];
            let mut tangents = Vec::new();
            for k in 0..d - 1 {
                big_n[k] = -grads[k][i];
                let mut t = vec![0.0; d];
                t[k] = 1.0;
                t[d - 1] = grads[k][i];
                tangents.push(t);
            }
            big_n[d - 1] = 1.0;
            let len = big_n.iter().map(|v| v * v).sum::<f64>().sqrt();
            NodeFrame { normal: big_n.iter().map(|v| v / len).collect(), big_n, tangents }
        })
        .collect();
    let mut normal = vec![0.0; d];
    normal[d - 1] = -1.0;
    let tangents = (0..d - 1)
        .map(|k| {
            let mut t = vec![0.0; d];
            t[k] = 1.0;
            t
        })
        .collect();
    Ok(BoundaryFrame { top, bottom: NodeFrame { big_n: normal.clone(), normal, tangents } })
}

/// Cauchy stress `-p I + nu (grad u + grad u^T)` from a velocity gradient.
pub fn cauchy_stress(grad_u: &DMatrix<f64>, p: f64, nu: f64) -> DMatrix<f64> {
    let n = grad_u.nrows();
    (grad_u + grad_u.transpose()) * nu - DMatrix::identity(n, n) * p
}

/// Fluid force on the plate at each torus node, `-sqrt(1+|grad eta|^2) (T(U,P) n . e_d)`,
/// from the velocity gradient and pressure traces on the top boundary.
pub fn contact_force(grad_u: &[DMatrix<f64>], p: &[f64], nu: f64, eta: &PlateProfile) -> Result<Vec<f64>> {
    if grad_u.len() != eta.grid.len() || p.len() != eta.grid.len() {
        return Err(FsiError::Resolution("boundary traces do not match the torus grid".into()));
    }
    let frame = boundary_frame(eta)?;
    let d = eta.grid.dim;
    Ok(frame
        .top
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let t = cauchy_stress(&grad_u[i], p[i], nu);
            let tn = &t * DVector::from_vec(f.big_n.clone());
            -tn[d - 1]
        })
        .collect())
}

/// `M` applied to the contact force.
pub fn contact_force_projected(
    grad_u: &[DMatrix<f64>],
    p: &[f64],
    nu: f64,
    eta: &PlateProfile,
) -> Result<PlateProfile> {
    let h = contact_force(grad_u, p, nu, eta)?;
    Ok(PlateProfile { grid: eta.grid.clone(), values: h, mean_zero: false }.project_mean_zero())
}

/// The fixed fluid domain `Omega(eta^S)` in 2D with a tensor collocation grid:
/// uniform nodes in `s`, Gauss–Lobatto nodes in `zeta = y3 / (1 + eta^S(s))`.
#[derive(Clone, Debug)]
pub struct ReferenceDomain {
    pub grid: TorusGrid,
    pub eta_s: PlateProfile,
    pub s: Vec<f64>,
    pub zeta: Vec<f64>,
    pub zeta_weights: Vec<f64>,
    pub dzeta: DMatrix<f64>,
    pub rho1: Vec<f64>,
    pub rho1_s: Vec<f64>,
}

impl ReferenceDomain {
    /// `n_vertical` is the number of Lobatto points across the layer.
    pub fn new(eta_s: &PlateProfile, n_vertical: usize) -> Result<Self> {
        if eta_s.grid.dim != 2 {
            return Err(FsiError::Geometry("field-level operations are implemented for dim = 2".into()));
        }
        if n_vertical < 3 {
            return Err(FsiError::Geometry("need at least 3 vertical points".into()));
        }
        eta_s.check_admissible()?;
        let grid = eta_s.grid.clone();
        let (zeta, zeta_weights) = to_unit_interval(gauss_lobatto(n_vertical));
        let dzeta = bary_diff_matrix(&zeta);
        let rho1 = eta_s.values.iter().map(|v| 1.0 + v).collect();
        let rho1_s = eta_s.derivative(&[1]);
        Ok(Self {
            s: periodic_nodes(grid.n_modes, grid.periods[0]),
            grid,
            eta_s: eta_s.clone(),
            zeta,
            zeta_weights,
            dzeta,
            rho1,
            rho1_s,
        })
    }

    pub fn flat(grid: &TorusGrid, n_vertical: usize) -> Result<Self> {
        Self::new(&PlateProfile::zero(grid), n_vertical)
    }

    pub fn nx(&self) -> usize {
        self.s.len()
    }

    pub fn nz(&self) -> usize {
        self.zeta.len()
    }

    pub fn len(&self) -> usize {
        self.nx() * self.nz()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn idx(&self, ix: usize, iz: usize) -> usize {
        ix * self.nz() + iz
    }

    /// Physical coordinates `(y1, y3)` of node `(ix, iz)`.
    pub fn point(&self, ix: usize, iz: usize) -> [f64; 2] {
        [self.s[ix], self.zeta[iz] * self.rho1[ix]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for ix in 0..self.nx() {
            for iz in 0..self.nz() {
                out.push(self.point(ix, iz));
            }
        }
        out
    }

    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.points().into_iter().map(f).collect()
    }

    fn d_s(&self, f: &[f64]) -> Vec<f64> {
        let (nx, nz) = (self.nx(), self.nz());
        let mut out = vec![0.0; f.len()];
        for iz in 0..nz {
            let line: Vec<f64> = (0..nx).map(|ix| f[ix * nz + iz]).collect();
            let d = fourier_derivative(&line, self.grid.periods[0], 1);
            for ix in 0..nx {
                out[ix * nz + iz] = d[ix];
            }
        }
        out
    }

    fn d_zeta(&self, f: &[f64]) -> Vec<f64> {
        let nz = self.nz();
        let mut out = vec![0.0; f.len()];
        for ix in 0..self.nx() {
            let col = DVector::from_column_slice(&f[ix * nz..(ix + 1) * nz]);
            let d = &self.dzeta * col;
            out[ix * nz..(ix + 1) * nz].copy_from_slice(d.as_slice());
        }
        out
    }

    /// `(d/dy1, d/dy3)` of a nodal field via the chain rule through `zeta`.
    pub fn grad(&self, f: &[f64]) -> [Vec<f64>; 2] {
        let fs = self.d_s(f);
        let fz = self.d_zeta(f);
        let nz = self.nz();
        let mut d1 = vec![0.0; f.len()];
        let mut d3 = vec![0.0; f.len()];
        for ix in 0..self.nx() {
            let (r, rs) = (self.rho1[ix], self.rho1_s[ix]);
            for iz in 0..nz {
                let k = ix * nz + iz;
                d1[k] = fs[k] - self.zeta[iz] * rs / r * fz[k];
                d3[k] = fz[k] / r;
            }
        }
        [d1, d3]
    }

    /// Top-boundary (`iz = nz-1`) and bottom (`iz = 0`) traces.
    pub fn top_trace(&self, f: &[f64]) -> Vec<f64> {
        (0..self.nx()).map(|ix| f[self.idx(ix, self.nz() - 1)]).collect()
    }

    pub fn bottom_trace(&self, f: &[f64]) -> Vec<f64> {
        (0..self.nx()).map(|ix| f[self.idx(ix, 0)]).collect()
    }

    /// Quadrature weights for `int_Omega f dy` (exact for polynomials in zeta up to the Lobatto degree).
    pub fn volume_weights(&self) -> Vec<f64> {
        let hx = self.grid.periods[0] / self.nx() as f64;
        let mut w = Vec::with_capacity(self.len());
        for ix in 0..self.nx() {
            for iz in 0..self.nz() {
                w.push(hx * self.zeta_weights[iz] * self.rho1[ix]);
            }
        }
        w
    }

    /// Piola transport of a velocity field given on `Omega(eta_phys)` onto this reference grid.
    pub fn piola_field(&self, u: &dyn Fn(&[f64]) -> Vec<f64>, eta_phys: &PlateProfile) -> Result<[Vec<f64>; 2]> {
        if eta_phys.grid != self.grid {
            return Err(FsiError::Resolution("deformed profile and reference grid differ".into()));
        }
        let mut u1 = Vec::with_capacity(self.len());
        let mut u3 = Vec::with_capacity(self.len());
        for p in self.points() {
            let v = piola_transform(u, eta_phys, &self.eta_s, &p)?;
            u1.push(v[0]);
            u3.push(v[1]);
        }
        Ok([u1, u3])
    }

    pub fn divergence(&self, u: &[Vec<f64>; 2]) -> Vec<f64> {
        let g1 = self.grad(&u[0]);
        let g3 = self.grad(&u[1]);
        g1[0].iter().zip(&g3[1]).map(|(a, b)| a + b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(grid: &TorusGrid, a: f64) -> PlateProfile {
        let l = grid.periods[0];
        PlateProfile::from_fn(grid, |s| a * (2.0 * PI * s[0] / l).sin())
    }

    #[test]
    fn domain_map_examples() {
        let g = TorusGrid::line(1.0, 16).unwrap();
        let z = PlateProfile::zero(&g);
        let one = PlateProfile::constant(&g, 1.0);
        let x = domain_map(&z, &one, &[0.3, 0.5]).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-14);
        let x = domain_map(&z, &sine(&g, 0.1), &[0.25, 0.5]).unwrap();
        assert!((x[1] - 0.55).abs() < 1e-13);
        let e = sine(&g, 0.2);
        let y = [0.71, 0.4];
        assert_eq!(domain_map(&e, &e, &y).unwrap(), y.to_vec());
    }

    #[test]
    fn inadmissible_rejected() {
        let g = TorusGrid::line(1.0, 8).unwrap();
        let bad = PlateProfile::constant(&g, -1.0);
        let z = PlateProfile::zero(&g);
        assert!(matches!(domain_map(&z, &bad, &[0.1, 0.1]), Err(FsiError::InadmissibleProfile { .. })));
    }

    #[test]
    fn jacobian_examples() {
        let g = TorusGrid::line(1.0, 16).unwrap();
        let z = PlateProfile::zero(&g);
        let one = PlateProfile::constant(&g, 1.0);
        let (j, det) = map_jacobian(&z, &one, &[0.2, 0.3]).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-15 && (j[(1, 1)] - 2.0).abs() < 1e-14 && j[(1, 0)].abs() < 1e-14);
        assert!((det - 2.0).abs() < 1e-14);
        let (j, det) = map_jacobian(&one, &one, &[0.2, 0.3]).unwrap();
        assert!((j - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14 && (det - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cofactor_identity() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, -0.5, 0.3, 4.0, 1.1, -2.0, 0.7, 0.9]);
        let c = cofactor(&m);
        let r = &m * c.transpose() - DMatrix::identity(3, 3) * m.determinant();
        assert!(r.norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(cofactor(&d), DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])));
    }

    #[test]
    fn piola_constant_profiles_orientation() {
        let g = TorusGrid::line(1.0, 8).unwrap();
        let c = 0.5;
        let z = PlateProfile::zero(&g);
        let cc = PlateProfile::constant(&g, c);
        let u = |_: &[f64]| vec![1.0, 0.0];
        // U on Omega(0), transported to Omega(c): X maps Omega(c) onto Omega(0)
        let v = piola_transform(&u, &z, &cc, &[0.1, 0.2]).unwrap();
        assert!((v[0] - 1.0 / (1.0 + c)).abs() < 1e-14 && v[1].abs() < 1e-14);
        let v = piola_transform(&u, &cc, &z, &[0.1, 0.2]).unwrap();
        assert!((v[0] - (1.0 + c)).abs() < 1e-14 && v[1].abs() < 1e-14);
    }

    #[test]
    fn frame_example() {
        let g = TorusGrid::line(1.0, 16).unwrap();
        let f = boundary_frame(&sine(&g, 0.1)).unwrap();
        let n0 = &f.top[0];
        let len = (1.0 + 0.04 * PI * PI).sqrt();
        assert!((n0.big_n[0] + 0.2 * PI).abs() < 1e-12);
        assert!((n0.normal[1] - 1.0 / len).abs() < 1e-12);
        for nf in &f.top {
            let dot: f64 = nf.normal.iter().zip(&nf.tangents[0]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn contact_force_examples() {
        let g = TorusGrid::line(1.0, 16).unwrap();
        let p0 = 2.5;
        for eta in [PlateProfile::zero(&g), sine(&g, 0.15)] {
            let grads = vec![DMatrix::zeros(2, 2); g.len()];
            let h = contact_force(&grads, &vec![p0; g.len()], 0.1, &eta).unwrap();
            assert!(h.iter().all(|v| (v - p0).abs() < 1e-12));
        }
        // shear U = (y3, 0): grad U = [[0,1],[0,0]]
        let gu = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let h = contact_force(&vec![gu; g.len()], &vec![0.0; g.len()], 0.1, &PlateProfile::zero(&g)).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn three_dimensional_pointwise() {
        let g = TorusGrid::new(3, &[1.0, 2.0], 8).unwrap();
        let e1 = PlateProfile::from_fn(&g, |s| 0.1 * (2.0 * PI * s[0]).cos() * (PI * s[1]).sin());
        let e2 = PlateProfile::from_fn(&g, |s| 0.2 * (PI * s[1]).cos());
        let y = [0.3, 0.7, 0.5];
        let x = domain_map(&e1, &e2, &y).unwrap();
        let back = domain_map(&e2, &e1, &x).unwrap();
        for k in 0..3 {
            assert!((back[k] - y[k]).abs() < 1e-12);
        }
        let (j, det) = map_jacobian(&e1, &e2, &y).unwrap();
        let r1 = 1.0 + e1.eval(&y[..2], &[0, 0]);
        let r2 = 1.0 + e2.eval(&y[..2], &[0, 0]);
        assert!((det - r2 / r1).abs() < 1e-12);
        // finite-difference-free check: the last row matches the analytic product rule
        let ds1 = -0.1 * 2.0 * PI * (2.0 * PI * 0.3f64).sin() * (PI * 0.7f64).sin();
        let dh = (0.0 * r1 - r2 * ds1) / (r1 * r1);
        assert!((j[(2, 0)] - y[2] * dh).abs() < 1e-12);
    }
}
