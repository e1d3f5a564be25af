//! Spectral Galerkin reduction of the linearized coupled system around a flat
//! stationary state.
//!
//! Horizontal direction: Fourier modes `k = 0..=K` with `K = n_modes/2 - 1`.
//! Vertical direction: shifted Legendre polynomials on `[0, 1]`. For each
//! `k >= 1` the raw coordinates are
//! `[A, B, C, D, xi1_c, xi1_s, xi2_c, xi2_s]` with
//! `w1 = A(y) cos(kx) + B(y) sin(kx)` and `w2 = C(y) cos(kx) + D(y) sin(kx)`.
//! For `k = 0` only `A` survives. The state space is the null space of the
//! divergence and normal-trace constraints, orthonormalized in the energy
//! inner product, so the mass matrix is the identity.

use crate::error::{FsiError, Result};
use crate::geometry::{PlateProfile, ReferenceDomain, TorusGrid};
use crate::numerics::{
    dft, fmt_f64, mat_mul, mat_tn, nullspace, shifted_legendre, shifted_legendre_derivative_matrix, LeastSquares,
};
use crate::transform_ops::{
    self, BoundaryField, Forcing, MatrixField, NonlinearResidual, Physics, StationaryState, VectorField,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

/// One Fourier block of the constrained basis.
#[derive(Clone, Debug)]
pub struct Block {
    pub k: usize,
    pub kappa: f64,
    pub raw_offset: usize,
    pub raw_len: usize,
    pub offset: usize,
    pub len: usize,
    /// Divergence and normal-trace constraints on the raw block coordinates.
    pub constraints: DMatrix<f64>,
    /// Energy Gram matrix of the raw block coordinates.
    pub gram: DMatrix<f64>,
    /// Orthonormal basis (raw_len x len).
    pub e: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Basis {
    pub length: f64,
    pub n_modes: usize,
    pub nv: usize,
    pub kmax: usize,
    pub alpha: f64,
    pub blocks: Vec<Block>,
    pub n: usize,
    pub n_raw: usize,
}

fn block_constraints(nv: usize, kappa: f64) -> DMatrix<f64> {
    let raw = 4 * nv + 4;
    let d = shifted_legendre_derivative_matrix(nv);
    let mut c = DMatrix::zeros(2 * nv + 4, raw);
    let (a, b, cc, dd) = (0, nv, 2 * nv, 3 * nv);
    for n in 0..nv {
        for m in 0..nv {
            c[(n, cc + m)] = d[(n, m)];
            c[(nv + n, dd + m)] = d[(n, m)];
        }
        c[(n, b + n)] = kappa;
        c[(nv + n, a + n)] = -kappa;
    }
    let r = 2 * nv;
    for m in 0..nv {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        c[(r, cc + m)] = sign;
        c[(r + 1, dd + m)] = sign;
        c[(r + 2, cc + m)] = 1.0;
        c[(r + 3, dd + m)] = 1.0;
    }
    c[(r + 2, 4 * nv + 2)] = -1.0;
    c[(r + 3, 4 * nv + 3)] = -1.0;
    c
}

fn block_gram(nv: usize, kappa: f64, length: f64, alpha: f64) -> DMatrix<f64> {
    let raw = 4 * nv + 4;
    let mut g = DMatrix::zeros(raw, raw);
    for f in 0..4 {
        for n in 0..nv {
            g[(f * nv + n, f * nv + n)] = 0.5 * length / (2.0 * n as f64 + 1.0);
        }
    }
    let a1 = alpha * kappa.powi(4) * 0.5 * length;
    g[(4 * nv, 4 * nv)] = a1;
    g[(4 * nv + 1, 4 * nv + 1)] = a1;
    g[(4 * nv + 2, 4 * nv + 2)] = 0.5 * length;
    g[(4 * nv + 3, 4 * nv + 3)] = 0.5 * length;
    g
}

/// `N (N^T H N)^{-1/2}`-type orthonormalization through a Cholesky factor.
fn orthonormalize(n: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = n.transpose() * h * n;
    let g = (&g + g.transpose()) * 0.5;
    let chol =
        g.cholesky().ok_or_else(|| FsiError::Assembly("Gram matrix of the null space is not positive".into()))?;
    let lt = chol.l().transpose();
    let inv = lt
        .solve_upper_triangular(&DMatrix::identity(lt.nrows(), lt.nrows()))
        .ok_or_else(|| FsiError::Assembly("singular Gram factor".into()))?;
    Ok(n * inv)
}

impl Basis {
    pub fn new(length: f64, n_modes: usize, nv: usize, alpha: f64) -> Result<Self> {
        if n_modes < 4 || !n_modes.is_multiple_of(2) {
            return Err(FsiError::Resolution(format!("n_modes must be even and >= 4, got {n_modes}")));
        }
        if nv < 4 {
            return Err(FsiError::Resolution(format!("n_vertical must be >= 4, got {nv}")));
        }
        if !(length > 0.0) || !(alpha > 0.0) {
            return Err(FsiError::Assembly("length and alpha must be positive".into()));
        }
        let kmax = n_modes / 2 - 1;
        let mut blocks = Vec::with_capacity(kmax + 1);
        let e0 = DMatrix::from_fn(nv, nv, |i, j| if i == j { ((2.0 * i as f64 + 1.0) / length).sqrt() } else { 0.0 });
        let g0 = DMatrix::from_fn(nv, nv, |i, j| if i == j { length / (2.0 * i as f64 + 1.0) } else { 0.0 });
        blocks.push(Block {
            k: 0,
            kappa: 0.0,
            raw_offset: 0,
            raw_len: nv,
            offset: 0,
            len: nv,
            constraints: DMatrix::zeros(0, nv),
            gram: g0,
            e: e0,
        });
        let (mut raw_off, mut off) = (nv, nv);
        for k in 1..=kmax {
            let kappa = 2.0 * PI * k as f64 / length;
            let c = block_constraints(nv, kappa);
            let (ns, rank) = nullspace(&c, 1e-12)?;
            if rank != c.nrows() || ns.ncols() != 2 * nv {
                return Err(FsiError::Assembly(format!(
                    "constraint rank deficiency at k={k}: rank {rank} of {} rows",
                    c.nrows()
                )));
            }
            let gram = block_gram(nv, kappa, length, alpha);
            let e = orthonormalize(&ns, &gram)?;
            let len = e.ncols();
            blocks.push(Block {
                k,
                kappa,
                raw_offset: raw_off,
                raw_len: 4 * nv + 4,
                offset: off,
                len,
                constraints: c,
                gram,
                e,
            });
            raw_off += 4 * nv + 4;
            off += len;
        }
        Ok(Self { length, n_modes, nv, kmax, alpha, blocks, n: off, n_raw: raw_off })
    }

    /// Raw coordinates of a state given in basis coordinates.
    pub fn raw(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.n_raw);
        for b in &self.blocks {
            let v = &b.e * c.rows(b.offset, b.len);
            r.rows_mut(b.raw_offset, b.raw_len).copy_from(&v);
        }
        r
    }

    /// Energy-orthogonal projection of raw coordinates onto the basis.
    pub fn coords(&self, raw: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.n);
        for b in &self.blocks {
            let v = b.e.transpose() * (&b.gram * raw.rows(b.raw_offset, b.raw_len));
            c.rows_mut(b.offset, b.len).copy_from(&v);
        }
        c
    }

    /// The projector `E E^T H` in raw coordinates.
    pub fn projector_raw(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_raw, self.n_raw);
        for b in &self.blocks {
            let pb = &b.e * b.e.transpose() * &b.gram;
            p.view_mut((b.raw_offset, b.raw_offset), (b.raw_len, b.raw_len)).copy_from(&pb);
        }
        p
    }

    /// Maximum constraint residual of a raw vector.
    pub fn constraint_residual(&self, raw: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.constraints.nrows() > 0)
            .map(|b| (&b.constraints * raw.rows(b.raw_offset, b.raw_len)).amax())
            .fold(0.0, f64::max)
    }

    /// Energy inner product of raw vectors.
    pub fn raw_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|bl| a.rows(bl.raw_offset, bl.raw_len).dot(&(&bl.gram * b.rows(bl.raw_offset, bl.raw_len))))
            .sum()
    }

    /// Plate Fourier coefficients `[c1, s1, c2, s2, ...]` of displacement and velocity.
    pub fn plate_coeffs(&self, c: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let raw = self.raw(c);
        let mut x1 = vec![0.0; 2 * self.kmax];
        let mut x2 = vec![0.0; 2 * self.kmax];
        for b in self.blocks.iter().skip(1) {
            let o = b.raw_offset + 4 * self.nv;
            let i = 2 * (b.k - 1);
            x1[i] = raw[o];
            x1[i + 1] = raw[o + 1];
            x2[i] = raw[o + 2];
            x2[i + 1] = raw[o + 3];
        }
        (x1, x2)
    }

    /// Plate-only indices `(block, column)` layout description for manifests.
    pub fn describe(&self) -> BasisDescription {
        BasisDescription {
            length: self.length,
            n_modes: self.n_modes,
            n_vertical: self.nv,
            kmax: self.kmax,
            dim: self.n,
            raw_dim: self.n_raw,
            block_dims: self.blocks.iter().map(|b| b.len).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisDescription {
    pub length: f64,
    pub n_modes: usize,
    pub n_vertical: usize,
    pub kmax: usize,
    pub dim: usize,
    pub raw_dim: usize,
    pub block_dims: Vec<usize>,
}

/// Plate operators in the mean-zero Fourier space: diagonal symbols per wavenumber.
#[derive(Clone, Debug)]
pub struct PlateOps {
    pub kappa: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

pub fn assemble_plate_ops(alpha: f64, delta: f64, length: f64, kmax: usize) -> PlateOps {
    let kappa: Vec<f64> = (1..=kmax).map(|k| 2.0 * PI * k as f64 / length).collect();
    PlateOps {
        a1: kappa.iter().map(|k| alpha * k.powi(4)).collect(),
        a2: kappa.iter().map(|k| delta * k * k).collect(),
        kappa,
    }
}

impl PlateOps {
    /// Symbol of `A1^p`.
    pub fn a1_pow(&self, p: f64) -> Vec<f64> {
        self.a1.iter().map(|v| v.powf(p)).collect()
    }

    /// The plate-only generator in energy-orthonormal coordinates,
    /// per wavenumber `[[0, s], [-s, -a2]]` with `s = sqrt(a1)`, for cos and sin.
    pub fn generator(&self) -> DMatrix<f64> {
        let k = self.a1.len();
        let mut m = DMatrix::zeros(4 * k, 4 * k);
        for i in 0..k {
            let s = self.a1[i].sqrt();
            for p in 0..2 {
                let x1 = 4 * i + p;
                let x2 = 4 * i + 2 + p;
                m[(x1, x2)] = s;
                m[(x2, x1)] = -s;
                m[(x2, x2)] = -self.a2[i];
            }
        }
        m
    }
}

/// Tensor quadrature: uniform in `x`, Gauss–Lobatto in `y`, shared with the
/// field-level operators through a flat [`ReferenceDomain`].
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub domain: ReferenceDomain,
    pub x: Vec<f64>,
    pub hx: f64,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(basis: &Basis) -> Result<Self> {
        let nx = 3 * basis.n_modes;
        let nz = 3 * basis.nv / 2 + 2;
        let grid = TorusGrid::line(basis.length, nx)?;
        let domain = ReferenceDomain::flat(&grid, nz)?;
        let weights = domain.volume_weights();
        Ok(Self { x: domain.s.clone(), hx: basis.length / nx as f64, domain, weights })
    }

    pub fn nx(&self) -> usize {
        self.domain.nx()
    }

    pub fn nz(&self) -> usize {
        self.domain.nz()
    }

    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn top(&self, ix: usize) -> usize {
        self.domain.idx(ix, self.nz() - 1)
    }

    pub fn bottom(&self, ix: usize) -> usize {
        self.domain.idx(ix, 0)
    }

    /// Plate profile on the quadrature line from Fourier coefficients `[c1, s1, ...]`.
    pub fn profile(&self, coeffs: &[f64], length: f64) -> PlateProfile {
        let v = self
            .x
            .iter()
            .map(|&x| {
                coeffs
                    .chunks(2)
                    .enumerate()
                    .map(|(i, cs)| {
                        let w = 2.0 * PI * (i + 1) as f64 * x / length;
                        cs[0] * w.cos() + cs[1] * w.sin()
                    })
                    .sum()
            })
            .collect();
        PlateProfile { grid: self.domain.grid.clone(), values: v, mean_zero: true }
    }
}

/// Basis functions sampled at the quadrature nodes (rows: nodes, columns: basis index).
#[derive(Clone, Debug)]
pub struct BasisEval {
    pub u: [DMatrix<f64>; 2],
    pub ux: [DMatrix<f64>; 2],
    pub uy: [DMatrix<f64>; 2],
    pub uxx: [DMatrix<f64>; 2],
    pub uyy: [DMatrix<f64>; 2],
    /// Plate displacement / velocity Fourier coefficients (2K x n).
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
}

impl BasisEval {
    pub fn new(basis: &Basis, quad: &Quadrature) -> Self {
        let (nq, n, nv) = (quad.len(), basis.n, basis.nv);
        let (nx, nz) = (quad.nx(), quad.nz());
        let z = &quad.domain.zeta;
        let mut pz = DMatrix::zeros(nz, nv);
        let mut dpz = DMatrix::zeros(nz, nv);
        let mut d2pz = DMatrix::zeros(nz, nv);
        for (i, &zz) in z.iter().enumerate() {
            let (p, dp, d2p) = shifted_legendre(nv, zz);
            for m in 0..nv {
                pz[(i, m)] = p[m];
                dpz[(i, m)] = dp[m];
                d2pz[(i, m)] = d2p[m];
            }
        }
        let zero = || DMatrix::<f64>::zeros(nq, n);
        let mut ev = Self {
            u: [zero(), zero()],
            ux: [zero(), zero()],
            uy: [zero(), zero()],
            uxx: [zero(), zero()],
            uyy: [zero(), zero()],
            p1: DMatrix::zeros(2 * basis.kmax, n),
            p2: DMatrix::zeros(2 * basis.kmax, n),
        };
        for b in &basis.blocks {
            if b.k == 0 {
                let pa = &pz * &b.e;
                let dpa = &dpz * &b.e;
                let d2pa = &d2pz * &b.e;
                for ix in 0..nx {
                    for iz in 0..nz {
                        let q = ix * nz + iz;
                        for j in 0..b.len {
                            ev.u[0][(q, b.offset + j)] = pa[(iz, j)];
                            ev.uy[0][(q, b.offset + j)] = dpa[(iz, j)];
                            ev.uyy[0][(q, b.offset + j)] = d2pa[(iz, j)];
                        }
                    }
                }
                continue;
            }
            let rows = |f: usize| b.e.rows(f * nv, nv).into_owned();
            let prof = |m: &DMatrix<f64>| [&pz * m, &dpz * m, &d2pz * m];
            let pa = prof(&rows(0));
            let pb = prof(&rows(1));
            let pc = prof(&rows(2));
            let pd = prof(&rows(3));
            let kp = b.kappa;
            for ix in 0..nx {
                let (c, s) = ((kp * quad.x[ix]).cos(), (kp * quad.x[ix]).sin());
                for iz in 0..nz {
                    let q = ix * nz + iz;
                    for j in 0..b.len {
                        let col = b.offset + j;
                        for (comp, (f, g)) in [(&pa, &pb), (&pc, &pd)].into_iter().enumerate() {
                            ev.u[comp][(q, col)] = f[0][(iz, j)] * c + g[0][(iz, j)] * s;
                            ev.ux[comp][(q, col)] = kp * (-f[0][(iz, j)] * s + g[0][(iz, j)] * c);
                            ev.uy[comp][(q, col)] = f[1][(iz, j)] * c + g[1][(iz, j)] * s;
                            ev.uxx[comp][(q, col)] = -kp * kp * ev.u[comp][(q, col)];
                            ev.uyy[comp][(q, col)] = f[2][(iz, j)] * c + g[2][(iz, j)] * s;
                        }
                    }
                }
            }
            let i = 2 * (b.k - 1);
            for j in 0..b.len {
                ev.p1[(i, b.offset + j)] = b.e[(4 * nv, j)];
                ev.p1[(i + 1, b.offset + j)] = b.e[(4 * nv + 1, j)];
                ev.p2[(i, b.offset + j)] = b.e[(4 * nv + 2, j)];
                ev.p2[(i + 1, b.offset + j)] = b.e[(4 * nv + 3, j)];
            }
        }
        ev
    }

    pub fn velocity(&self, c: &DVector<f64>) -> VectorField {
        [(&self.u[0] * c).as_slice().to_vec(), (&self.u[1] * c).as_slice().to_vec()]
    }

    /// `grad[i][j] = d u_i / d x_j` at the nodes.
    pub fn gradient(&self, c: &DVector<f64>) -> [[Vec<f64>; 2]; 2] {
        let f = |m: &DMatrix<f64>| (m * c).as_slice().to_vec();
        [[f(&self.ux[0]), f(&self.uy[0])], [f(&self.ux[1]), f(&self.uy[1])]]
    }
}

/// Product `A^T diag(w) B`.
fn weighted(a: &DMatrix<f64>, w: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let wb = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| w[i] * b[(i, j)]);
    mat_tn(a, &wb)
}

fn rows_at(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Stationary body forces with analytic value and gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BodyForce {
    Zero,
    /// `f = (a, 0)`: drives a Robin shear profile.
    Shear(f64),
    /// `f = a (cos(2 pi x/L) y(1-y), sin(2 pi x/L) y^2)`.
    Cell(f64),
}

impl BodyForce {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "zero" {
            return Ok(Self::Zero);
        }
        let (kind, amp) =
            s.split_once(':').ok_or_else(|| FsiError::Config(format!("unknown forcing descriptor '{s}'")))?;
        let a: f64 = amp.trim().parse().map_err(|_| FsiError::Config(format!("bad forcing amplitude in '{s}'")))?;
        match kind.trim() {
            "shear" => Ok(Self::Shear(a)),
            "cell" => Ok(Self::Cell(a)),
            other => Err(FsiError::Config(format!("unknown forcing kind '{other}'"))),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::Shear(a) => format!("shear:{}", fmt_f64(*a)),
            Self::Cell(a) => format!("cell:{}", fmt_f64(*a)),
        }
    }

    pub fn forcing(&self, length: f64) -> Option<Forcing> {
        match *self {
            Self::Zero => None,
            Self::Shear(a) => Some(Arc::new(move |_x: [f64; 2]| ([a, 0.0], [[0.0; 2]; 2]))),
            Self::Cell(a) => {
                let w = 2.0 * PI / length;
                Some(Arc::new(move |x: [f64; 2]| {
                    let (c, s) = ((w * x[0]).cos(), (w * x[0]).sin());
                    let y = x[1];
                    (
                        [a * c * y * (1.0 - y), a * s * y * y],
                        [[-a * w * s * y * (1.0 - y), a * c * (1.0 - 2.0 * y)], [a * w * c * y * y, 2.0 * a * s * y]],
                    )
                }))
            }
        }
    }
}

/// Least-squares pressure recovery from a gradient field on the quadrature grid.
#[derive(Clone, Debug)]
pub struct PressureSolver {
    values: DMatrix<f64>,
    lstsq: LeastSquares,
    sqrt_w: Vec<f64>,
}

impl PressureSolver {
    pub fn new(basis: &Basis, quad: &Quadrature) -> Self {
        let np = basis.nv + 1;
        let (nx, nz, nq) = (quad.nx(), quad.nz(), quad.len());
        let mut funcs: Vec<(usize, bool, usize)> = (1..np).map(|n| (0, true, n)).collect();
        for k in 1..=basis.kmax {
            for n in 0..np {
                funcs.push((k, true, n));
                funcs.push((k, false, n));
            }
        }
        let m = funcs.len();
        let mut val = DMatrix::zeros(nq, m);
        let mut grad = DMatrix::zeros(2 * nq, m);
        for iz in 0..nz {
            let (p, dp, _) = shifted_legendre(np, quad.domain.zeta[iz]);
            for ix in 0..nx {
                let q = ix * nz + iz;
                for (j, &(k, is_cos, n)) in funcs.iter().enumerate() {
                    let kp = 2.0 * PI * k as f64 / basis.length;
                    let (t, dt) = if is_cos {
                        ((kp * quad.x[ix]).cos(), -kp * (kp * quad.x[ix]).sin())
                    } else {
                        ((kp * quad.x[ix]).sin(), kp * (kp * quad.x[ix]).cos())
                    };
                    val[(q, j)] = t * p[n];
                    grad[(q, j)] = dt * p[n];
                    grad[(nq + q, j)] = t * dp[n];
                }
            }
        }
        let sqrt_w: Vec<f64> = quad.weights.iter().map(|w| w.sqrt()).collect();
        for q in 0..nq {
            for j in 0..m {
                grad[(q, j)] *= sqrt_w[q];
                grad[(nq + q, j)] *= sqrt_w[q];
            }
        }
        Self { values: val, lstsq: LeastSquares::new(&grad), sqrt_w }
    }

    /// Pressure (mean of the basis removed) whose gradient best matches `g`.
    pub fn solve(&self, g: &VectorField) -> Vec<f64> {
        let nq = self.sqrt_w.len();
        let rhs = DVector::from_fn(2 * nq, |i, _| {
            if i < nq {
                g[0][i] * self.sqrt_w[i]
            } else {
                g[1][i - nq] * self.sqrt_w[i - nq]
            }
        });
        let c = self.lstsq.solve(&rhs);
        (&self.values * c).as_slice().to_vec()
    }
}

/// Stationary state on the flat reference domain.
#[derive(Clone)]
pub struct SteadyState {
    pub force: BodyForce,
    /// Velocity in basis coordinates (plate parts vanish).
    pub coords: DVector<f64>,
    /// Pressure at the quadrature nodes.
    pub pressure: Vec<f64>,
    /// Plate load making the flat profile stationary, on the quadrature line.
    pub h_s: Vec<f64>,
    pub residual: f64,
    /// Residual norm after each Newton iteration.
    pub newton_log: Vec<f64>,
}

impl std::fmt::Debug for SteadyState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SteadyState")
            .field("force", &self.force)
            .field("residual", &self.residual)
            .field("newton_log", &self.newton_log)
            .finish_non_exhaustive()
    }
}

/// Shared Galerkin building blocks.
#[derive(Clone, Debug)]
pub struct Galerkin {
    pub basis: Basis,
    pub quad: Quadrature,
    pub eval: BasisEval,
    pub physics: Physics,
    pub pressure: PressureSolver,
    bottom_idx: Vec<usize>,
    top_idx: Vec<usize>,
}

impl Galerkin {
    pub fn new(length: f64, n_modes: usize, nv: usize, physics: Physics) -> Result<Self> {
        check_physics(&physics)?;
        let basis = Basis::new(length, n_modes, nv, physics.alpha)?;
        let quad = Quadrature::new(&basis)?;
        let eval = BasisEval::new(&basis, &quad);
        let pressure = PressureSolver::new(&basis, &quad);
        let bottom_idx = (0..quad.nx()).map(|ix| quad.bottom(ix)).collect();
        let top_idx = (0..quad.nx()).map(|ix| quad.top(ix)).collect();
        Ok(Self { basis, quad, eval, physics, pressure, bottom_idx, top_idx })
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }

    pub fn plate_ops(&self) -> PlateOps {
        assemble_plate_ops(self.physics.alpha, self.physics.delta, self.basis.length, self.basis.kmax)
    }

    fn lambda_diag(&self) -> (Vec<f64>, Vec<f64>) {
        let ops = self.plate_ops();
        let half = 0.5 * self.basis.length;
        let mut l1 = Vec::new();
        let mut l2 = Vec::new();
        for i in 0..ops.a1.len() {
            for _ in 0..2 {
                l1.push(ops.a1[i] * half);
                l2.push(ops.a2[i] * half);
            }
        }
        (l1, l2)
    }

    /// `-2 nu (D w, D phi)`, the friction terms and the plate damping: the symmetric dissipative part.
    pub fn dissipation_matrix(&self) -> DMatrix<f64> {
        let ev = &self.eval;
        let w = &self.quad.weights;
        let nu = self.physics.nu;
        let sym = &ev.uy[0] + &ev.ux[1];
        let mut s = (weighted(&ev.ux[0], w, &ev.ux[0]) * 2.0
            + weighted(&ev.uy[1], w, &ev.uy[1]) * 2.0
            + weighted(&sym, w, &sym))
            * (-nu);
        s += self.friction_matrix();
        let (_, l2) = self.lambda_diag();
        s -= weighted(&ev.p2, &l2, &ev.p2);
        s
    }

    fn friction_matrix(&self) -> DMatrix<f64> {
        let hx = vec![self.quad.hx; self.quad.nx()];
        let bot = rows_at(&self.eval.u[0], &self.bottom_idx);
        let top = rows_at(&self.eval.u[0], &self.top_idx);
        weighted(&bot, &hx, &bot) * (-self.physics.beta1) + weighted(&top, &hx, &top) * (-self.physics.beta2)
    }

    /// Viscous plus friction part (fluid Stokes operator with Navier conditions).
    fn stokes_matrix(&self) -> DMatrix<f64> {
        let ev = &self.eval;
        let w = &self.quad.weights;
        let nu = self.physics.nu;
        let sym = &ev.uy[0] + &ev.ux[1];
        let s = (weighted(&ev.ux[0], w, &ev.ux[0]) * 2.0
            + weighted(&ev.uy[1], w, &ev.uy[1]) * 2.0
            + weighted(&sym, w, &sym))
            * (-nu);
        s + self.friction_matrix()
    }

    /// `int v . phi_i` for a nodal vector field, for all basis functions.
    pub fn project_interior(&self, v: &VectorField) -> DVector<f64> {
        let w = &self.quad.weights;
        let f = |m: &DMatrix<f64>, c: &[f64]| {
            let wc = DVector::from_iterator(c.len(), c.iter().zip(w).map(|(a, b)| a * b));
            m.tr_mul(&wc)
        };
        f(&self.eval.u[0], &v[0]) + f(&self.eval.u[1], &v[1])
    }

    /// `oint g . (phi_i - T zeta2_i)_tau` for tangential boundary fields (flat reference).
    pub fn project_boundary(&self, g: &BoundaryField) -> DVector<f64> {
        let hx = self.quad.hx;
        let top = rows_at(&self.eval.u[0], &self.top_idx);
        let bot = rows_at(&self.eval.u[0], &self.bottom_idx);
        let gt = DVector::from_iterator(g.top.len(), g.top.iter().map(|v| v[0] * hx));
        let gb = DVector::from_iterator(g.bottom.len(), g.bottom.iter().map(|v| v[0] * hx));
        top.tr_mul(&gt) + bot.tr_mul(&gb)
    }

    /// `<h, zeta2_i>` for a plate load on the quadrature line.
    pub fn project_plate(&self, h: &[f64]) -> DVector<f64> {
        let c = fourier_coeffs(h, self.basis.kmax);
        let half = 0.5 * self.basis.length;
        self.eval.p2.tr_mul(&DVector::from_iterator(c.len(), c.iter().map(|v| v * half)))
    }

    /// Basis functions with vanishing plate components (orthonormal, columns in basis coordinates).
    pub fn fluid_subspace(&self) -> Result<DMatrix<f64>> {
        let p = DMatrix::from_fn(2 * self.eval.p1.nrows(), self.n(), |i, j| {
            let h = self.eval.p1.nrows();
            if i < h {
                self.eval.p1[(i, j)]
            } else {
                self.eval.p2[(i - h, j)]
            }
        });
        Ok(nullspace(&p, 1e-12)?.0)
    }

    fn field_of(&self, c: &DVector<f64>) -> (VectorField, [[Vec<f64>; 2]; 2]) {
        (self.eval.velocity(c), self.eval.gradient(c))
    }

    /// Solves the stationary fluid problem with a flat interface by Newton's method.
    pub fn steady_state_solve(&self, force: &BodyForce, guess: Option<&DVector<f64>>) -> Result<SteadyState> {
        let q = self.fluid_subspace()?;
        let nq = self.quad.len();
        let fvals: VectorField = match force.forcing(self.basis.length) {
            Some(f) => {
                let pts = self.quad.domain.points();
                let v: Vec<[f64; 2]> = pts.iter().map(|y| f(*y).0).collect();
                [v.iter().map(|a| a[0]).collect(), v.iter().map(|a| a[1]).collect()]
            }
            None => [vec![0.0; nq], vec![0.0; nq]],
        };
        let fproj = q.tr_mul(&self.project_interior(&fvals));
        let stokes = mat_tn(&q, &mat_mul(&self.stokes_matrix(), &q));
        let phi = [mat_mul(&self.eval.u[0], &q), mat_mul(&self.eval.u[1], &q)];
        let dphi = [
            [mat_mul(&self.eval.ux[0], &q), mat_mul(&self.eval.uy[0], &q)],
            [mat_mul(&self.eval.ux[1], &q), mat_mul(&self.eval.uy[1], &q)],
        ];
        let w = &self.quad.weights;
        let mut a = match guess {
            Some(g) => q.tr_mul(g),
            None => DVector::zeros(q.ncols()),
        };
        let mut log = Vec::new();
        let max_iter = 30;
        for _ in 0..=max_iter {
            let c = &q * &a;
            let (u, g) = self.field_of(&c);
            let conv: VectorField =
                [0, 1].map(|i| (0..nq).map(|p| u[0][p] * g[i][0][p] + u[1][p] * g[i][1][p]).collect());
            let r = &stokes * &a - q.tr_mul(&self.project_interior(&conv)) + &fproj;
            let rn = r.norm();
            log.push(rn);
            if rn <= 1e-10 {
                let pressure = self.stationary_pressure(&c, &fvals);
                let h_s = self.stationary_plate_load(&c, &pressure);
                return Ok(SteadyState {
                    force: force.clone(),
                    coords: c,
                    pressure,
                    h_s,
                    residual: rn,
                    newton_log: log,
                });
            }
            // Jacobian of the convection term: (dw . grad) w + (w . grad) dw
            let mut jac = stokes.clone();
            for i in 0..2 {
                let mut t = DMatrix::zeros(nq, q.ncols());
                for p in 0..nq {
                    for j in 0..q.ncols() {
                        t[(p, j)] = phi[0][(p, j)] * g[i][0][p]
                            + phi[1][(p, j)] * g[i][1][p]
                            + u[0][p] * dphi[i][0][(p, j)]
                            + u[1][p] * dphi[i][1][(p, j)];
                    }
                }
                jac -= weighted(&phi[i], w, &t);
            }
            let da = jac.lu().solve(&(-&r)).ok_or(FsiError::NewtonDiverged { iters: log.len(), residual: rn })?;
            a += da;
            if !a.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        Err(FsiError::NewtonDiverged { iters: log.len(), residual: *log.last().unwrap_or(&f64::NAN) })
    }

    fn stationary_pressure(&self, c: &DVector<f64>, f: &VectorField) -> Vec<f64> {
        let nq = self.quad.len();
        let nu = self.physics.nu;
        let (u, g) = self.field_of(c);
        let lap = [0, 1].map(|i| (&self.eval.uxx[i] * c + &self.eval.uyy[i] * c).as_slice().to_vec());
        let rhs: VectorField = [0, 1].map(|i| {
            (0..nq).map(|p| nu * lap[i][p] - (u[0][p] * g[i][0][p] + u[1][p] * g[i][1][p]) + f[i][p]).collect()
        });
        self.pressure.solve(&rhs)
    }

    fn stationary_plate_load(&self, c: &DVector<f64>, p: &[f64]) -> Vec<f64> {
        let g = self.eval.gradient(c);
        let vals: Vec<f64> = self.top_idx.iter().map(|&q| p[q] - 2.0 * self.physics.nu * g[1][1][q]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| -(v - mean)).collect()
    }
}

/// Fourier coefficients `[c1, s1, ..., cK, sK]` of samples on a uniform grid.
pub fn fourier_coeffs(v: &[f64], kmax: usize) -> Vec<f64> {
    let c = dft(v);
    let mut out = Vec::with_capacity(2 * kmax);
    for k in 1..=kmax {
        out.push(2.0 * c[k].re);
        out.push(-2.0 * c[k].im);
    }
    out
}

fn check_physics(p: &Physics) -> Result<()> {
    if !(p.nu > 0.0) || !(p.alpha > 0.0) || p.delta < 0.0 || p.beta1 < 0.0 || p.beta2 < 0.0 {
        return Err(FsiError::Config(format!(
            "physics parameters must satisfy nu>0, alpha>0, delta>=0, beta>=0 (got {p:?})"
        )));
    }
    Ok(())
}

/// Linear parts of the geometric terms for every plate Fourier direction.
#[derive(Clone, Debug)]
pub struct PlateLinearization {
    pub l1: Vec<MatrixField>,
    /// Response to the displacement direction.
    pub l2_disp: Vec<VectorField>,
    /// Response to the velocity direction.
    pub l2_vel: Vec<VectorField>,
    pub l3: Vec<BoundaryField>,
}

impl PlateLinearization {
    fn zero(nq: usize, nx: usize, m: usize) -> Self {
        Self {
            l1: vec![transform_ops::zeros_m(nq); m],
            l2_disp: vec![transform_ops::zeros_v(nq); m],
            l2_vel: vec![transform_ops::zeros_v(nq); m],
            l3: vec![BoundaryField::zero(nx); m],
        }
    }

    /// Combines the per-direction responses for coefficient vectors of `xi1`, `xi2`.
    pub fn combine(&self, x1: &[f64], x2: &[f64]) -> transform_ops::Linearization {
        let nq = self.l2_disp.first().map(|v| v[0].len()).unwrap_or(0);
        let nx = self.l3.first().map(|b| b.top.len()).unwrap_or(0);
        let mut l1 = transform_ops::zeros_m(nq);
        let mut l2 = transform_ops::zeros_v(nq);
        let mut l3 = BoundaryField::zero(nx);
        for (mu, (&a, &b)) in x1.iter().zip(x2).enumerate() {
            if a != 0.0 {
                for i in 0..2 {
                    for j in 0..2 {
                        l1[i][j].iter_mut().zip(&self.l1[mu][i][j]).for_each(|(p, q)| *p += a * q);
                    }
                }
                l2 = transform_ops::axpy_v(a, &self.l2_disp[mu], &l2);
                l3 = l3.axpy(a, &self.l3[mu]);
            }
            if b != 0.0 {
                l2 = transform_ops::axpy_v(b, &self.l2_vel[mu], &l2);
            }
        }
        transform_ops::Linearization { l1, l2, l3 }
    }
}

/// Actuator direction on the bottom boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Tangential,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    Constant,
    Cos(usize),
    Sin(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actuator {
    pub component: Component,
    pub profile: Profile,
}

/// Weight `m` on the bottom boundary and the actuator family.
#[derive(Clone, Debug)]
pub struct ControlShape {
    pub x: Vec<f64>,
    pub hx: f64,
    pub length: f64,
    pub m: Vec<f64>,
    pub actuators: Vec<Actuator>,
}

impl ControlShape {
    /// Raised-cosine-squared bump on the middle third, normalized to unit discrete integral.
    pub fn new(x: &[f64], length: f64, modes: usize, beta1: f64) -> Result<Self> {
        if modes == 0 {
            return Err(FsiError::Config("control needs at least one actuator mode".into()));
        }
        let hx = length / x.len() as f64;
        let (a, w) = (length / 3.0, length / 3.0);
        let raw: Vec<f64> = x
            .iter()
            .map(|&s| {
                let t = (s - a) / w;
                if (0.0..=1.0).contains(&t) {
                    (PI * t).sin().powi(4)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = raw.iter().sum::<f64>() * hx;
        let m = raw.iter().map(|v| v / total).collect();
        let mut actuators = Vec::new();
        for j in 1..=modes {
            actuators.push(Actuator { component: Component::Normal, profile: Profile::Cos(j) });
            actuators.push(Actuator { component: Component::Normal, profile: Profile::Sin(j) });
        }
        if beta1 > 0.0 {
            actuators.push(Actuator { component: Component::Tangential, profile: Profile::Constant });
            actuators.push(Actuator { component: Component::Tangential, profile: Profile::Cos(1) });
            actuators.push(Actuator { component: Component::Tangential, profile: Profile::Sin(1) });
        }
        Ok(Self { x: x.to_vec(), hx, length, m, actuators })
    }

    pub fn integral(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.hx
    }

    /// Samples of actuator `j` as `(tangential, normal-component along e_2)` pairs.
    pub fn actuator(&self, j: usize) -> Vec<[f64; 2]> {
        let a = self.actuators[j];
        self.x
            .iter()
            .map(|&s| {
                let w = |k: usize| 2.0 * PI * k as f64 * s / self.length;
                let v = match a.profile {
                    Profile::Constant => 1.0,
                    Profile::Cos(k) => w(k).cos(),
                    Profile::Sin(k) => w(k).sin(),
                };
                match a.component {
                    Component::Tangential => [v, 0.0],
                    Component::Normal => [0.0, v],
                }
            })
            .collect()
    }

    /// `M v = m v - (int m v . n) m n` with outward normal `n = -e_2`.
    pub fn apply(&self, v: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let flux: f64 = self.integral(&v.iter().zip(&self.m).map(|(a, m)| -m * a[1]).collect::<Vec<_>>());
        v.iter().zip(&self.m).map(|(a, &m)| [m * a[0], m * a[1] + flux * m]).collect()
    }

    /// Normal flux `int M v . n` (vanishes by construction).
    pub fn flux(&self, v: &[[f64; 2]]) -> f64 {
        self.integral(&self.apply(v).iter().map(|a| -a[1]).collect::<Vec<_>>())
    }
}

/// Generic finite-dimensional linear control system in energy-orthonormal coordinates.
pub trait LinearControlSystem {
    fn a(&self) -> &DMatrix<f64>;
    fn a_adjoint(&self) -> &DMatrix<f64>;
    fn b(&self) -> &DMatrix<f64>;
    fn dim(&self) -> usize {
        self.a().nrows()
    }
    /// `B* eps` for an adjoint eigenvector with eigenvalue `mu`, as a vector whose
    /// Euclidean norm is the norm of the control space.
    fn b_star_samples(&self, psi: &DVector<Complex64>, _mu: Complex64) -> Result<Vec<Complex64>> {
        Ok(self.b().map(|v| Complex64::new(v, 0.0)).tr_mul(psi).iter().copied().collect())
    }
    fn b_star_norm(&self, psi: &DVector<Complex64>, mu: Complex64) -> Result<f64> {
        Ok(self.b_star_samples(psi, mu)?.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
    }
    /// Component norms `(fluid, plate displacement, plate velocity)`; plain systems
    /// report everything as the first component.
    fn component_norms(&self, c: &DVector<f64>) -> [f64; 3] {
        [c.norm(), 0.0, 0.0]
    }
}

/// A plain matrix triple, for toy problems and imported systems.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSystem {
    pub a: DMatrix<f64>,
    pub a_adj: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl MatrixSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Self { a_adj: a.transpose(), a, b }
    }
}

impl LinearControlSystem for MatrixSystem {
    fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    fn a_adjoint(&self) -> &DMatrix<f64> {
        &self.a_adj
    }
    fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

/// The assembled Galerkin system.
#[derive(Clone, Debug)]
pub struct DiscreteSystem {
    pub galerkin: Galerkin,
    pub steady: SteadyState,
    pub stationary: StationaryState,
    pub lin: PlateLinearization,
    pub lambda0: f64,
    /// Generator of the linearized dynamics (mass matrix is the identity).
    pub stiffness: DMatrix<f64>,
    /// Independently assembled adjoint generator.
    pub adjoint: DMatrix<f64>,
    pub dissipation: DMatrix<f64>,
    pub shape: ControlShape,
    pub control: DMatrix<f64>,
}

/// Discretization and control settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub length: f64,
    pub n_modes: usize,
    pub n_vertical: usize,
    pub physics: Physics,
    pub force: BodyForce,
    pub lambda0: Option<f64>,
    pub actuator_modes: usize,
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self {
            length: 1.0,
            n_modes: 16,
            n_vertical: 24,
            physics: Physics::default(),
            force: BodyForce::Zero,
            lambda0: None,
            actuator_modes: 1,
        }
    }
}

impl SystemSpec {
    /// The same setup with `n_modes` and `n_vertical` increased by half (rounded to valid sizes).
    pub fn refined(&self) -> Self {
        let mut s = self.clone();
        s.n_modes = (self.n_modes * 3 / 2).div_ceil(2) * 2;
        s.n_vertical = self.n_vertical * 3 / 2;
        s
    }
}

impl DiscreteSystem {
    pub fn build(spec: &SystemSpec) -> Result<Self> {
        let galerkin = Galerkin::new(spec.length, spec.n_modes, spec.n_vertical, spec.physics)?;
        let steady = galerkin.steady_state_solve(&spec.force, None)?;
        Self::assemble(galerkin, steady, spec.lambda0, spec.actuator_modes)
    }

    pub fn assemble(
        galerkin: Galerkin,
        steady: SteadyState,
        lambda0: Option<f64>,
        actuator_modes: usize,
    ) -> Result<Self> {
        let g = &galerkin;
        let ws = g.eval.velocity(&steady.coords);
        let stationary = StationaryState {
            domain: g.quad.domain.clone(),
            w: ws.clone(),
            p: steady.pressure.clone(),
            physics: g.physics,
            forcing: steady.force.forcing(g.basis.length),
        };
        let lin = plate_linearization(g, &stationary)?;
        let wmax = ws.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        let lambda0 = lambda0.unwrap_or(10.0 * 1f64.max(g.physics.nu).max(wmax).powi(2));
        let (stiffness, adjoint) = assemble_generators(g, &steady, &lin)?;
        let dissipation = g.dissipation_matrix();
        let shape = ControlShape::new(&g.quad.x, g.basis.length, actuator_modes, g.physics.beta1)?;
        let mut sys = Self {
            galerkin,
            steady,
            stationary,
            lin,
            lambda0,
            stiffness,
            adjoint,
            dissipation,
            shape,
            control: DMatrix::zeros(0, 0),
        };
        sys.control = sys.assemble_control()?;
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.galerkin.n()
    }

    /// Columns `B_j = (lambda0 - A_S) P D(M v_j)` through the divergence-free lift of the normal data.
    fn assemble_control(&self) -> Result<DMatrix<f64>> {
        let g = &self.galerkin;
        let n = g.n();
        let mut b = DMatrix::zeros(n, self.shape.actuators.len());
        for j in 0..self.shape.actuators.len() {
            let mv = self.shape.apply(&self.shape.actuator(j));
            let col = self.control_column(&mv);
            b.set_column(j, &col);
        }
        Ok(b)
    }

    /// `B v` for boundary data `M v` sampled on the quadrature line.
    pub fn control_column(&self, mv: &[[f64; 2]]) -> DVector<f64> {
        let g = &self.galerkin;
        let nq = g.quad.len();
        let hx = g.quad.hx;
        let bot = rows_at(&g.eval.u[0], &g.bottom_idx);
        let gt = DVector::from_iterator(mv.len(), mv.iter().map(|v| v[0] * hx * g.physics.beta1));
        let r = bot.tr_mul(&gt);
        let (wg, dwg) = self.lift(mv);
        let nu = g.physics.nu;
        let w = &g.quad.weights;
        // a(W_g, e_i): viscous and Oseen parts (tangential traces of the lift vanish)
        let e11: Vec<f64> = (0..nq).map(|p| 2.0 * nu * dwg[0][0][p] * w[p]).collect();
        let e22: Vec<f64> = (0..nq).map(|p| 2.0 * nu * dwg[1][1][p] * w[p]).collect();
        let e12: Vec<f64> = (0..nq).map(|p| nu * (dwg[0][1][p] + dwg[1][0][p]) * w[p]).collect();
        let tv = |v: Vec<f64>| DVector::from_vec(v);
        let mut a = -(g.eval.ux[0].tr_mul(&tv(e11))
            + g.eval.uy[1].tr_mul(&tv(e22))
            + (&g.eval.uy[0] + &g.eval.ux[1]).tr_mul(&tv(e12)));
        let ws = &self.stationary.w;
        let gws = g.eval.gradient(&self.steady.coords);
        let osn: VectorField = [0, 1].map(|i| {
            (0..nq)
                .map(|p| {
                    ws[0][p] * dwg[i][0][p]
                        + ws[1][p] * dwg[i][1][p]
                        + wg[0][p] * gws[i][0][p]
                        + wg[1][p] * gws[i][1][p]
                })
                .collect()
        });
        a -= g.project_interior(&osn);
        let gp = g.project_interior(&wg);
        r + a - &self.stiffness * gp
    }

    /// Divergence-free lift `(psi_y, -psi_x)` with `psi = psi_b(x) (1-y)^2 (1+2y)` and gradient.
    fn lift(&self, mv: &[[f64; 2]]) -> (VectorField, [[Vec<f64>; 2]; 2]) {
        let g = &self.galerkin;
        let (nx, nz) = (g.quad.nx(), g.quad.nz());
        let l = g.basis.length;
        let gn: Vec<f64> = mv.iter().map(|v| v[1]).collect();
        // psi_b' = -g_n
        let c = dft(&gn);
        let mut psi = vec![0.0; nx];
        let mut psi_xx = vec![0.0; nx];
        for (ix, &x) in g.quad.x.iter().enumerate() {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for (k, ck) in c.iter().enumerate() {
                let kk = if k <= nx / 2 { k as i64 } else { k as i64 - nx as i64 };
                if kk == 0 || (nx % 2 == 0 && k == nx / 2) {
                    continue;
                }
                let om = 2.0 * PI * kk as f64 / l;
                let e = Complex64::new(0.0, om * x).exp();
                acc += (-ck / Complex64::new(0.0, om) * e).re;
                acc2 += (-ck * Complex64::new(0.0, om) * e).re;
            }
            psi[ix] = acc;
            psi_xx[ix] = acc2;
        }
        let psi_x: Vec<f64> = gn.iter().map(|v| -v).collect();
        let nq = nx * nz;
        let mut wv = transform_ops::zeros_v(nq);
        let mut dw = [[vec![0.0; nq], vec![0.0; nq]], [vec![0.0; nq], vec![0.0; nq]]];
        for ix in 0..nx {
            for iz in 0..nz {
                let p = ix * nz + iz;
                let y = g.quad.domain.zeta[iz];
                let q = 1.0 - 3.0 * y * y + 2.0 * y * y * y;
                let q1 = -6.0 * y + 6.0 * y * y;
                let q2 = -6.0 + 12.0 * y;
                wv[0][p] = psi[ix] * q1;
                wv[1][p] = -psi_x[ix] * q;
                dw[0][0][p] = psi_x[ix] * q1;
                dw[0][1][p] = psi[ix] * q2;
                dw[1][0][p] = -psi_xx[ix] * q;
                dw[1][1][p] = -psi_x[ix] * q1;
            }
        }
        (wv, dw)
    }

    /// `B* eps` on the bottom boundary (samples of `(tangential, e_2)` components), no conjugation.
    pub fn b_star(&self, psi: &DVector<Complex64>, mu: Complex64) -> Vec<[Complex64; 2]> {
        let g = &self.galerkin;
        let nq = g.quad.len();
        let nu = g.physics.nu;
        let re = psi.map(|z| z.re);
        let im = psi.map(|z| z.im);
        let ws = &self.stationary.w;
        let gws = g.eval.gradient(&self.steady.coords);
        let parts = [&re, &im].map(|c| {
            let (u, gu) = (g.eval.velocity(c), g.eval.gradient(c));
            let lap = [0, 1].map(|i| (&g.eval.uxx[i] * c + &g.eval.uyy[i] * c).as_slice().to_vec());
            (u, gu, lap)
        });
        // grad r = nu Lap phi + (w.grad) phi - (grad w)^T phi - mu phi, split in real/imaginary parts
        let base = |k: usize| -> VectorField {
            let (u, gu, lap) = &parts[k];
            [0, 1].map(|i| {
                (0..nq)
                    .map(|p| {
                        nu * lap[i][p] + ws[0][p] * gu[i][0][p] + ws[1][p] * gu[i][1][p]
                            - (gws[0][i][p] * u[0][p] + gws[1][i][p] * u[1][p])
                    })
                    .collect()
            })
        };
        let (b_re, b_im) = (base(0), base(1));
        let rhs_re: VectorField = [0, 1]
            .map(|i| (0..nq).map(|p| b_re[i][p] - (mu.re * parts[0].0[i][p] - mu.im * parts[1].0[i][p])).collect());
        let rhs_im: VectorField = [0, 1]
            .map(|i| (0..nq).map(|p| b_im[i][p] - (mu.re * parts[1].0[i][p] + mu.im * parts[0].0[i][p])).collect());
        let r_re = g.pressure.solve(&rhs_re);
        let r_im = g.pressure.solve(&rhs_im);
        let nx = g.quad.nx();
        let mut tn_n = vec![Complex64::new(0.0, 0.0); nx];
        let mut tn_t = vec![Complex64::new(0.0, 0.0); nx];
        for ix in 0..nx {
            let p = g.bottom_idx[ix];
            let c = |k: usize| {
                let gu = &parts[k].1;
                (-nu * (gu[0][1][p] + gu[1][0][p]), 2.0 * nu * gu[1][1][p])
            };
            let (t_re, n_re) = c(0);
            let (t_im, n_im) = c(1);
            // n = -e2: (Tn)_1 = -T12, Tn.n = T22 = -r + 2 nu d2 phi2
            tn_t[ix] = Complex64::new(t_re, t_im);
            tn_n[ix] = Complex64::new(n_re - r_re[p], n_im - r_im[p]);
        }
        let m = &self.shape.m;
        let cst: Complex64 = tn_n.iter().zip(m).map(|(v, &w)| v * w).sum::<Complex64>() * self.shape.hx;
        let tangential = g.physics.beta1 > 0.0;
        (0..nx)
            .map(|ix| {
                let t = if tangential { -m[ix] * tn_t[ix] } else { Complex64::new(0.0, 0.0) };
                // -(m (Tn.n - c) n) with n = -e2 gives +m (Tn.n - c) along e2
                [t, m[ix] * (tn_n[ix] - cst)]
            })
            .collect()
    }

    /// `int v . B* eps` for an actuator `j` (bilinear, no conjugation).
    pub fn b_star_pairing(&self, j: usize, bs: &[[Complex64; 2]]) -> Complex64 {
        let v = self.shape.actuator(j);
        v.iter().zip(bs).map(|(a, b)| b[0] * a[0] + b[1] * a[1]).sum::<Complex64>() * self.shape.hx
    }

    /// Projection of a nonlinear right-hand side onto the basis.
    pub fn project_residual(&self, r: &NonlinearResidual) -> DVector<f64> {
        let g = &self.galerkin;
        g.project_interior(&r.interior) + g.project_boundary(&r.boundary) + g.project_plate(&r.plate.values)
    }

    /// Energy norm `||W||_H` (the basis is orthonormal).
    pub fn norm(c: &DVector<f64>) -> f64 {
        c.norm()
    }

    /// Component norms `(||w||, ||A1^{1/2} xi1||, ||xi2||)`.
    pub fn component_norms(&self, c: &DVector<f64>) -> [f64; 3] {
        let raw = self.galerkin.basis.raw(c);
        let mut acc = [0.0; 3];
        for b in &self.galerkin.basis.blocks {
            let v = raw.rows(b.raw_offset, b.raw_len);
            let nv = self.galerkin.basis.nv;
            for i in 0..b.raw_len {
                let e = v[i] * v[i] * b.gram[(i, i)];
                if b.k == 0 || i < 4 * nv {
                    acc[0] += e;
                } else if i < 4 * nv + 2 {
                    acc[1] += e;
                } else {
                    acc[2] += e;
                }
            }
        }
        acc.map(f64::sqrt)
    }

    pub fn spec_summary(&self) -> SystemManifest {
        SystemManifest {
            basis: self.galerkin.basis.describe(),
            physics: self.galerkin.physics,
            lambda0: self.lambda0,
            force: self.steady.force.descriptor(),
            actuators: self.shape.actuators.clone(),
            checksum: String::new(),
        }
    }

    /// Writes the matrices as CSV plus a JSON manifest with a SHA-256 checksum.
    pub fn export(&self, dir: &Path) -> Result<SystemManifest> {
        std::fs::create_dir_all(dir)?;
        let mut hasher = Sha256::new();
        for (name, m) in self.export_matrices() {
            let text = matrix_csv(&m);
            hasher.update(name.as_bytes());
            hasher.update(text.as_bytes());
            std::fs::write(dir.join(format!("{name}.csv")), text)?;
        }
        let mut manifest = self.spec_summary();
        manifest.checksum = hex::encode(hasher.finalize());
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    fn export_matrices(&self) -> Vec<(&'static str, DMatrix<f64>)> {
        vec![
            ("mass", DMatrix::identity(self.n(), self.n())),
            ("stiffness", self.stiffness.clone()),
            ("adjoint", self.adjoint.clone()),
            ("control", self.control.clone()),
        ]
    }

    /// Reads an exported directory back, verifying the checksum.
    pub fn import(dir: &Path) -> Result<(SystemManifest, MatrixSystem)> {
        let manifest: SystemManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut hasher = Sha256::new();
        let mut mats = Vec::new();
        for name in ["mass", "stiffness", "adjoint", "control"] {
            let text = std::fs::read_to_string(dir.join(format!("{name}.csv")))?;
            hasher.update(name.as_bytes());
            hasher.update(text.as_bytes());
            mats.push(parse_matrix_csv(&text)?);
        }
        if hex::encode(hasher.finalize()) != manifest.checksum {
            return Err(FsiError::Assembly("checksum mismatch in exported system".into()));
        }
        let b = mats.pop().unwrap();
        let a_adj = mats.pop().unwrap();
        let a = mats.pop().unwrap();
        Ok((manifest, MatrixSystem { a, a_adj, b }))
    }
}

impl LinearControlSystem for DiscreteSystem {
    fn a(&self) -> &DMatrix<f64> {
        &self.stiffness
    }
    fn a_adjoint(&self) -> &DMatrix<f64> {
        &self.adjoint
    }
    fn b(&self) -> &DMatrix<f64> {
        &self.control
    }
    /// Boundary samples of `B* eps` weighted so that the Euclidean norm is the `L^2(Gamma_0)` norm.
    fn b_star_samples(&self, psi: &DVector<Complex64>, mu: Complex64) -> Result<Vec<Complex64>> {
        let w = self.shape.hx.sqrt();
        Ok(self.b_star(psi, mu).iter().flat_map(|v| [v[0] * w, v[1] * w]).collect())
    }
    fn component_norms(&self, c: &DVector<f64>) -> [f64; 3] {
        DiscreteSystem::component_norms(self, c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemManifest {
    pub basis: BasisDescription,
    pub physics: Physics,
    pub lambda0: f64,
    pub force: String,
    pub actuators: Vec<Actuator>,
    pub checksum: String,
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| FsiError::Assembly(format!("bad number '{v}'"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(FsiError::Assembly("ragged matrix csv".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

/// Linear geometric responses for each plate direction, computed by the field-level operators.
pub fn plate_linearization(g: &Galerkin, st: &StationaryState) -> Result<PlateLinearization> {
    let nq = g.quad.len();
    let nx = g.quad.nx();
    let m = 2 * g.basis.kmax;
    let trivial = st.forcing.is_none() && st.w.iter().all(|c| c.iter().all(|v| *v == 0.0)) && {
        let gp = g.quad.domain.grad(&st.p);
        gp.iter().all(|c| c.iter().all(|v| v.abs() < 1e-13))
    };
    if trivial {
        return Ok(PlateLinearization::zero(nq, nx, m));
    }
    let mut out = PlateLinearization::zero(nq, nx, m);
    let zero = PlateProfile::zero(&g.quad.domain.grid);
    for mu in 0..m {
        let mut coeffs = vec![0.0; m];
        coeffs[mu] = 1.0;
        let dir = g.quad.profile(&coeffs, g.basis.length);
        out.l1[mu] = transform_ops::linearize_l1(st, &dir)?;
        out.l2_disp[mu] = transform_ops::linearize_l2(st, &dir, &zero)?;
        out.l2_vel[mu] = transform_ops::linearize_l2(st, &zero, &dir)?;
        out.l3[mu] = transform_ops::linearize_l3(st, &dir)?;
    }
    Ok(out)
}

/// Samples of `L^1`, `L^2`, `L^3` for all plate directions as node-by-direction matrices.
struct LinearTables {
    l1: [[DMatrix<f64>; 2]; 2],
    l2_disp: [DMatrix<f64>; 2],
    l2_vel: [DMatrix<f64>; 2],
    l3_top: DMatrix<f64>,
    l3_bottom: DMatrix<f64>,
}

fn linear_tables(lin: &PlateLinearization) -> LinearTables {
    let m = lin.l1.len();
    let nq = lin.l2_disp.first().map(|v| v[0].len()).unwrap_or(0);
    let nx = lin.l3.first().map(|b| b.top.len()).unwrap_or(0);
    let col = |f: &dyn Fn(usize, usize) -> f64, rows: usize| DMatrix::from_fn(rows, m, f);
    LinearTables {
        l1: [0, 1].map(|i| [0, 1].map(|j| col(&|p, mu| lin.l1[mu][i][j][p], nq))),
        l2_disp: [0, 1].map(|i| col(&|p, mu| lin.l2_disp[mu][i][p], nq)),
        l2_vel: [0, 1].map(|i| col(&|p, mu| lin.l2_vel[mu][i][p], nq)),
        l3_top: col(&|p, mu| lin.l3[mu].top[p][0], nx),
        l3_bottom: col(&|p, mu| lin.l3[mu].bottom[p][0], nx),
    }
}

/// Assembles `A_S` (as `S_ij = a(e_j, e_i)`) and, separately, the adjoint generator.
fn assemble_generators(
    g: &Galerkin,
    steady: &SteadyState,
    lin: &PlateLinearization,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ev = &g.eval;
    let w = &g.quad.weights;
    let nq = g.quad.len();
    let n = g.n();
    let stokes = g.stokes_matrix();
    let ws = ev.velocity(&steady.coords);
    let gw = ev.gradient(&steady.coords);
    let (l1d, l2d) = g.lambda_diag();

    // Oseen trial fields (w^S . grad) phi + (phi . grad) w^S and the adjoint ones
    let mut osn = [DMatrix::zeros(nq, n), DMatrix::zeros(nq, n)];
    let mut osn_adj = [DMatrix::zeros(nq, n), DMatrix::zeros(nq, n)];
    for i in 0..2 {
        for p in 0..nq {
            for j in 0..n {
                let grad_i = [ev.ux[i][(p, j)], ev.uy[i][(p, j)]];
                let adv = ws[0][p] * grad_i[0] + ws[1][p] * grad_i[1];
                osn[i][(p, j)] = adv + ev.u[0][(p, j)] * gw[i][0][p] + ev.u[1][(p, j)] * gw[i][1][p];
                osn_adj[i][(p, j)] = adv - (gw[0][i][p] * ev.u[0][(p, j)] + gw[1][i][p] * ev.u[1][(p, j)]);
            }
        }
    }
    let t = linear_tables(lin);
    let grads = [[&ev.ux[0], &ev.uy[0]], [&ev.ux[1], &ev.uy[1]]];
    let bot = rows_at(&ev.u[0], &g.bottom_idx);
    let top = rows_at(&ev.u[0], &g.top_idx);
    let hx = vec![g.quad.hx; g.quad.nx()];

    // geometric coupling: rows test functions, columns trial states
    let mut geo = DMatrix::zeros(n, n);
    for i in 0..2 {
        for j in 0..2 {
            geo -= weighted(grads[i][j], w, &(&t.l1[i][j] * &ev.p1));
        }
        geo -= weighted(&ev.u[i], w, &(&t.l2_disp[i] * &ev.p1 + &t.l2_vel[i] * &ev.p2));
    }
    geo -= weighted(&top, &hx, &(&t.l3_top * &ev.p1));
    geo -= weighted(&bot, &hx, &(&t.l3_bottom * &ev.p1));

    let mut s = stokes.clone();
    s -= weighted(&ev.u[0], w, &osn[0]) + weighted(&ev.u[1], w, &osn[1]);
    s += weighted(&ev.p1, &l1d, &ev.p2) - weighted(&ev.p2, &l1d, &ev.p1) - weighted(&ev.p2, &l2d, &ev.p2);
    s += &geo;

    // adjoint: A* (phi, z1, z2) = (div T(phi) + (w.grad)phi - (grad w)^T phi, -z2, A1 z1 - A2 z2)
    let mut sa = stokes;
    sa += weighted(&ev.u[0], w, &osn_adj[0]) + weighted(&ev.u[1], w, &osn_adj[1]);
    sa += weighted(&ev.p2, &l1d, &ev.p1) - weighted(&ev.p1, &l1d, &ev.p2) - weighted(&ev.p2, &l2d, &ev.p2);
    let mut geo_adj = DMatrix::zeros(n, n);
    for i in 0..2 {
        for j in 0..2 {
            geo_adj -= weighted(&(&t.l1[i][j] * &ev.p1), w, grads[i][j]);
        }
        geo_adj -= weighted(&(&t.l2_disp[i] * &ev.p1 + &t.l2_vel[i] * &ev.p2), w, &ev.u[i]);
    }
    geo_adj -= weighted(&(&t.l3_top * &ev.p1), &hx, &top);
    geo_adj -= weighted(&(&t.l3_bottom * &ev.p1), &hx, &bot);
    sa += geo_adj;
    if !s.iter().chain(sa.iter()).all(|v| v.is_finite()) {
        return Err(FsiError::Assembly("non-finite entries in the assembled operator".into()));
    }
    Ok((s, sa))
}
