//! Small spectral building blocks shared by the geometry, transform and
//! Galerkin layers: periodic differentiation, Legendre families, quadrature
//! rules and polynomial differentiation matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::error::{FsiError, Result};
use faer::linalg::solvers::Solve;

/// Wavenumber of Fourier index `k` on a grid of `n` points (FFT ordering).
fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Complex DFT coefficients `c_k` with `f(s_j) = sum_k c_k e^{2 pi i k j / n}`.
pub fn dft(values: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let inv = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= inv);
    buf
}

fn idft_real(coeffs: &[Complex64]) -> Vec<f64> {
    let n = coeffs.len();
    let mut buf = coeffs.to_vec();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Spectral derivative of a periodic sample vector.
///
/// The Nyquist coefficient is dropped for odd orders so that the result stays
/// real and the operator is skew.
pub fn fourier_derivative(values: &[f64], period: f64, order: u32) -> Vec<f64> {
    let n = values.len();
    if order == 0 {
        return values.to_vec();
    }
    let mut c = dft(values);
    for (k, ck) in c.iter_mut().enumerate() {
        let kk = signed_index(k, n);
        if n.is_multiple_of(2) && k == n / 2 && order % 2 == 1 {
            *ck = Complex64::new(0.0, 0.0);
            continue;
        }
        let w = Complex64::new(0.0, 2.0 * PI * kk as f64 / period);
        *ck *= w.powu(order);
    }
    idft_real(&c)
}

/// Evaluates the trigonometric interpolant (and its derivative of `order`) at `s`.
pub fn trig_interp(coeffs: &[Complex64], period: f64, s: f64, order: u32) -> f64 {
    let n = coeffs.len();
    let mut acc = 0.0;
    for (k, ck) in coeffs.iter().enumerate() {
        let kk = signed_index(k, n);
        let nyq = n.is_multiple_of(2) && k == n / 2;
        let omega = 2.0 * PI * kk as f64 / period;
        let phase = Complex64::new(0.0, omega * s).exp();
        let mut term = *ck * phase * Complex64::new(0.0, omega).powu(order);
        if nyq {
            // symmetric split of the Nyquist mode: cos(omega s) has derivatives of both signs
            let c = ck.re;
            term = Complex64::new(c * nyquist_cos_derivative(omega, s, order), 0.0);
        }
        acc += term.re;
    }
    acc
}

fn nyquist_cos_derivative(omega: f64, s: f64, order: u32) -> f64 {
    let phase = omega * s + order as f64 * PI / 2.0;
    omega.powi(order as i32) * phase.cos()
}

/// Legendre polynomials `P_0..P_{n-1}` and their first two derivatives at `t in [-1,1]`.
pub fn legendre_all(n: usize, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut d2p = vec![0.0; n];
    if n == 0 {
        return (p, dp, d2p);
    }
    p[0] = 1.0;
    if n > 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for k in 2..n {
        let kf = k as f64;
        p[k] = ((2.0 * kf - 1.0) * t * p[k - 1] - (kf - 1.0) * p[k - 2]) / kf;
        dp[k] = dp[k - 2] + (2.0 * kf - 1.0) * p[k - 1];
        d2p[k] = d2p[k - 2] + (2.0 * kf - 1.0) * dp[k - 1];
    }
    (p, dp, d2p)
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp, _) = legendre_all(n + 1, t);
            let dt = p[n] / dp[n];
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp, _) = legendre_all(n + 1, t);
        x[i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp[n] * dp[n]);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| w[i]).collect())
}

/// Gauss–Lobatto–Legendre nodes and weights on [-1, 1] with `npts >= 2` points.
pub fn gauss_lobatto(npts: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(npts >= 2);
    let n = npts - 1;
    let mut x = vec![0.0; npts];
    x[0] = -1.0;
    x[n] = 1.0;
    for i in 1..n {
        // interior nodes are the roots of P_n'
        let mut t = -(PI * i as f64 / n as f64).cos();
        for _ in 0..100 {
            let (_, dp, d2p) = legendre_all(n + 1, t);
            let dt = dp[n] / d2p[n];
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        x[i] = t;
    }
    let nf = n as f64;
    let w = x
        .iter()
        .map(|&t| {
            let (p, _, _) = legendre_all(n + 1, t);
            2.0 / (nf * (nf + 1.0) * p[n] * p[n])
        })
        .collect();
    (x, w)
}

/// Maps a rule on [-1,1] to [0,1].
pub fn to_unit_interval((x, w): (Vec<f64>, Vec<f64>)) -> (Vec<f64>, Vec<f64>) {
    (x.iter().map(|t| 0.5 * (t + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
}

/// Polynomial differentiation matrix on arbitrary distinct nodes (barycentric form).
pub fn bary_diff_matrix(nodes: &[f64]) -> DMatrix<f64> {
    let n = nodes.len();
    let mut wts = vec![1.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                wts[j] *= nodes[j] - nodes[k];
            }
        }
        wts[j] = 1.0 / wts[j];
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = wts[j] / wts[i] / (nodes[i] - nodes[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    d
}

/// Shifted Legendre `P_n(2y-1)` on [0,1] with first and second `y`-derivatives.
pub fn shifted_legendre(n: usize, y: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (p, dp, d2p) = legendre_all(n, 2.0 * y - 1.0);
    (p, dp.iter().map(|v| 2.0 * v).collect(), d2p.iter().map(|v| 4.0 * v).collect())
}

/// Coefficient map of `d/dy` for shifted Legendre expansions on [0,1].
pub fn shifted_legendre_derivative_matrix(n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    for m in 0..n {
        for k in 0..m {
            if (m - k) % 2 == 1 {
                d[(k, m)] = 2.0 * (2.0 * k as f64 + 1.0);
            }
        }
    }
    d
}

/// Orthonormal basis of the null space of `c` (columns) and the numerical rank.
pub fn nullspace(c: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let (r, n) = c.shape();
    let m = faer::Mat::<f64>::from_fn(r, n, |i, j| c[(i, j)]);
    let svd = m.svd().map_err(|e| FsiError::Assembly(format!("svd failed: {e:?}")))?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let rank = s.iter().filter(|&&v| v > rel_tol * smax.max(f64::MIN_POSITIVE)).count();
    let v = svd.V();
    Ok((DMatrix::from_fn(n, n - rank, |i, j| v[(i, rank + j)]), rank))
}

/// Dense eigendecomposition of a real matrix: eigenvalues and unit right eigenvectors (columns).
///
/// Vectors whose residual is not at roundoff level (this happens for exactly repeated
/// complex pairs) are recomputed by inverse iteration, orthogonally to the accepted
/// vectors of the same eigenvalue cluster.
pub fn eigen_dense(a: &DMatrix<f64>) -> Result<(Vec<Complex64>, DMatrix<Complex64>)> {
    let n = a.nrows();
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let evd = m.eigen().map_err(|e| FsiError::Spectrum(format!("eigensolver failed: {e:?}")))?;
    let s = evd.S();
    let u = evd.U();
    let vals: Vec<Complex64> = (0..n)
        .map(|i| {
            let z = s.column_vector()[i];
            Complex64::new(z.re, z.im)
        })
        .collect();
    let mut vecs = DMatrix::from_fn(n, n, |i, j| {
        let z = u[(i, j)];
        Complex64::new(z.re, z.im)
    });
    let ac = a.map(|v| Complex64::new(v, 0.0));
    let anorm = a.norm().max(f64::MIN_POSITIVE);
    let tol = 1e-13 * anorm;
    let res = |v: &DMatrix<Complex64>, i: usize| {
        let x = v.column(i);
        (&ac * x - x * vals[i]).norm() / x.norm().max(f64::MIN_POSITIVE)
    };
    let mut good: Vec<bool> = (0..n).map(|i| res(&vecs, i) <= tol).collect();
    for i in 0..n {
        if good[i] {
            let c = vecs.column(i).norm();
            vecs.column_mut(i).scale_mut(1.0 / c);
        }
    }
    for i in 0..n {
        if good[i] {
            continue;
        }
        // conjugate partner already repaired
        if let Some(j) = (0..n).find(|&j| good[j] && j != i && vals[i].im != 0.0 && vals[j] == vals[i].conj()) {
            let x = vecs.column(j).map(|z| z.conj());
            if (&ac * &x - &x * vals[i]).norm() <= tol {
                vecs.set_column(i, &x);
                good[i] = true;
                continue;
            }
        }
        let cluster: Vec<usize> =
            (0..n).filter(|&j| j != i && good[j] && (vals[j] - vals[i]).norm() <= 1e-8 * anorm).collect();
        let shift = vals[i] + Complex64::new(1e-10 * anorm, 1e-10 * anorm);
        let shifted = faer::Mat::<Complex64>::from_fn(n, n, |r, c| {
            ac[(r, c)] - if r == c { shift } else { Complex64::new(0.0, 0.0) }
        });
        let lu = shifted.partial_piv_lu();
        let mut x = DVector::from_fn(n, |k, _| Complex64::new((k as f64 + 1.0).sin(), (2.0 * k as f64 + 1.0).cos()));
        for _ in 0..4 {
            for &j in &cluster {
                let q = vecs.column(j).into_owned();
                let p = q.dotc(&x);
                x -= q * p;
            }
            let rhs = faer::Col::<Complex64>::from_fn(n, |k| x[k]);
            let sol = lu.solve(&rhs);
            x = DVector::from_fn(n, |k, _| sol[k]);
            let nx = x.norm();
            if !(nx > 0.0 && nx.is_finite()) {
                return Err(FsiError::Spectrum("inverse iteration failed".into()));
            }
            x /= Complex64::new(nx, 0.0);
        }
        vecs.set_column(i, &x);
        let r = res(&vecs, i);
        if r > 1e-8 * anorm.max(1.0) {
            return Err(FsiError::Spectrum(format!("eigenvector for {} not resolved (residual {r:e})", vals[i])));
        }
        good[i] = true;
    }
    Ok((vals, vecs))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Uniform periodic nodes `j L / n`.
pub fn periodic_nodes(n: usize, period: f64) -> Vec<f64> {
    (0..n).map(|j| period * j as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_derivative_of_sine() {
        let n = 16;
        let l = 2.0;
        let s = periodic_nodes(n, l);
        let f: Vec<f64> = s.iter().map(|x| (2.0 * PI * 3.0 * x / l).sin()).collect();
        let d = fourier_derivative(&f, l, 1);
        let d3 = fourier_derivative(&f, l, 3);
        let w = 2.0 * PI * 3.0 / l;
        for (i, x) in s.iter().enumerate() {
            assert!((d[i] - w * (w * x).cos()).abs() < 1e-11);
            assert!((d3[i] + w.powi(3) * (w * x).cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn trig_interp_matches_samples_and_derivatives() {
        let n = 12;
        let s = periodic_nodes(n, 1.0);
        let f: Vec<f64> = s.iter().map(|x| 1.0 + (2.0 * PI * x).cos() + 0.3 * (4.0 * PI * x).sin()).collect();
        let c = dft(&f);
        let x = 0.1234;
        let exact = 1.0 + (2.0 * PI * x).cos() + 0.3 * (4.0 * PI * x).sin();
        assert!((trig_interp(&c, 1.0, x, 0) - exact).abs() < 1e-12);
        let dexact = -2.0 * PI * (2.0 * PI * x).sin() + 0.3 * 4.0 * PI * (4.0 * PI * x).cos();
        assert!((trig_interp(&c, 1.0, x, 1) - dexact).abs() < 1e-10);
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        let (x, w) = gauss_legendre(6);
        let i: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(10)).sum();
        assert!((i - 2.0 / 11.0).abs() < 1e-14);
        let (x, w) = gauss_lobatto(7);
        let i: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(10)).sum();
        assert!((i - 2.0 / 11.0).abs() < 1e-14);
        assert_eq!(x[0], -1.0);
        assert_eq!(x[6], 1.0);
    }

    #[test]
    fn bary_diff_exact_on_polynomials() {
        let (x, _) = to_unit_interval(gauss_lobatto(9));
        let d = bary_diff_matrix(&x);
        let f: Vec<f64> = x.iter().map(|t| t.powi(5) - 2.0 * t).collect();
        for i in 0..x.len() {
            let v: f64 = (0..x.len()).map(|j| d[(i, j)] * f[j]).sum();
            assert!((v - (5.0 * x[i].powi(4) - 2.0)).abs() < 1e-11);
        }
    }

    #[test]
    fn legendre_derivative_matrix_matches_pointwise() {
        let n = 7;
        let c: Vec<f64> = (0..n).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let d = shifted_legendre_derivative_matrix(n);
        let dc = &d * nalgebra::DVector::from_vec(c.clone());
        let y = 0.37;
        let (p, dp, _) = shifted_legendre(n, y);
        let lhs: f64 = (0..n).map(|k| c[k] * dp[k]).sum();
        let rhs: f64 = (0..n).map(|k| dc[k] * p[k]).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

fn to_faer(m: &DMatrix<f64>) -> faer::MatRef<'_, f64> {
    faer::MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `a^T b` through a blocked kernel (the tall quadrature products dominate assembly).
pub fn mat_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "mat_tn dimension mismatch");
    let c = to_faer(a).transpose() * to_faer(b);
    from_faer(c.as_ref())
}

/// `a b` through a blocked kernel.
pub fn mat_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mat_mul dimension mismatch");
    let c = to_faer(a) * to_faer(b);
    from_faer(c.as_ref())
}

/// Precomputed Householder QR for repeated dense least-squares solves.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    qr: faer::linalg::solvers::Qr<f64>,
    cols: usize,
}

impl LeastSquares {
    pub fn new(m: &DMatrix<f64>) -> Self {
        Self { qr: to_faer(m).qr(), cols: m.ncols() }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        use faer::linalg::solvers::SolveLstsq;
        let b = faer::MatRef::from_column_major_slice(rhs.as_slice(), rhs.len(), 1);
        let x = self.qr.solve_lstsq(b);
        DVector::from_fn(self.cols, |i, _| x[(i, 0)])
    }
}
