//! Eigenstructure of the discrete generator and its adjoint, the numerical
//! Fattorini–Hautus test and the unstable invariant subspace for a decay rate.

use crate::discretization::LinearControlSystem;
use crate::error::{FsiError, Result};
use crate::numerics::{eigen_dense, fmt_f64};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

/// Eigenvalues closer than this (relative to the spectral scale) are treated as one cluster.
const CLUSTER_TOL: f64 = 1e-8;
/// Bi-orthogonalization conditioning above which a pair is flagged as defective.
const CONDITION_LIMIT: f64 = 1e8;

#[derive(Clone, Debug)]
pub struct EigenPair {
    pub value: Complex64,
    /// Unit right eigenvector.
    pub right: DVector<Complex64>,
    /// Adjoint eigenvector, scaled so that `left^T right = 1` over the selected set.
    pub left: DVector<Complex64>,
    pub residual: f64,
    pub left_residual: f64,
    /// Index of the cluster of numerically equal eigenvalues this pair belongs to.
    pub cluster: usize,
}

#[derive(Clone, Debug)]
pub struct Spectrum {
    pub pairs: Vec<EigenPair>,
    pub shift: f64,
    /// All eigenvalues of the generator, sorted by decreasing real part.
    pub all_values: Vec<Complex64>,
    /// Condition number of the bi-orthogonalization.
    pub condition: f64,
    pub defective: bool,
}

impl Spectrum {
    /// Largest real part among computed eigenvalues.
    pub fn abscissa(&self) -> f64 {
        self.all_values.first().map(|z| z.re).unwrap_or(f64::NEG_INFINITY)
    }

    /// True when every eigenvalue with `Re >= -sigma` is among the resolved pairs.
    pub fn covers(&self, sigma: f64) -> bool {
        let needed = self.all_values.iter().filter(|z| z.re >= -sigma).count();
        self.pairs.len() >= needed
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,residual,left_residual\n");
        for p in &self.pairs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(p.value.re),
                fmt_f64(p.value.im),
                fmt_f64(p.residual),
                fmt_f64(p.left_residual)
            ));
        }
        s
    }

    pub fn summary(&self) -> SpectrumSummary {
        SpectrumSummary {
            shift: self.shift,
            count: self.pairs.len(),
            abscissa: self.abscissa(),
            max_residual: self.pairs.iter().map(|p| p.residual.max(p.left_residual)).fold(0.0, f64::max),
            condition: self.condition,
            defective: self.defective,
            eigenvalues: self.pairs.iter().map(|p| [p.value.re, p.value.im]).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumSummary {
    pub shift: f64,
    pub count: usize,
    pub abscissa: f64,
    pub max_residual: f64,
    pub condition: f64,
    pub defective: bool,
    pub eigenvalues: Vec<[f64; 2]>,
}

fn sort_desc(vals: &[Complex64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        vals[b]
            .re
            .partial_cmp(&vals[a].re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(vals[b].im.partial_cmp(&vals[a].im).unwrap_or(std::cmp::Ordering::Equal))
    });
    idx
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn residual(a: &DMatrix<Complex64>, x: &DVector<Complex64>, lambda: Complex64) -> f64 {
    (a * x - x * lambda).norm() / x.norm().max(f64::MIN_POSITIVE)
}

/// The `count` rightmost eigenpairs of the generator (extended to whole clusters and
/// conjugate pairs), with adjoint eigenvectors from the adjoint matrix.
pub fn compute_spectrum<S: LinearControlSystem + ?Sized>(sys: &S, count: usize, shift: f64) -> Result<Spectrum> {
    let a = sys.a();
    let n = a.nrows();
    if n == 0 {
        return Err(FsiError::Spectrum("empty system".into()));
    }
    let shifted = a - DMatrix::identity(n, n) * shift;
    let (vals, vecs) = eigen_dense(&shifted)?;
    let vals: Vec<Complex64> = vals.iter().map(|z| z + shift).collect();
    let shifted_adj = sys.a_adjoint() - DMatrix::identity(n, n) * shift;
    let (avals, avecs) = eigen_dense(&shifted_adj)?;
    let avals: Vec<Complex64> = avals.iter().map(|z| z + shift).collect();

    let order = sort_desc(&vals);
    let scale = vals.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let close = |x: Complex64, y: Complex64| (x - y).norm() <= CLUSTER_TOL * scale;
    let mut take = count.min(n);
    // extend to close clusters and conjugate partners
    while take < n {
        let last = vals[order[take - 1]];
        let next = vals[order[take]];
        if close(last, next)
            || (last.im != 0.0 && (next - last.conj()).norm() <= 1e-6 * scale)
            || next.re >= last.re - CLUSTER_TOL * scale
        {
            take += 1;
        } else {
            break;
        }
    }
    let chosen: Vec<usize> = order[..take].to_vec();

    // greedy matching of adjoint eigenvalues
    let mut used = vec![false; n];
    let mut matched = Vec::with_capacity(take);
    for &i in &chosen {
        let (j, _) = avals
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, z)| (j, (z - vals[i]).norm()))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .ok_or_else(|| FsiError::Spectrum("adjoint spectrum exhausted".into()))?;
        if (avals[j] - vals[i]).norm() > 1e-6 * scale {
            return Err(FsiError::Spectrum(format!(
                "adjoint eigenvalue mismatch at {}: nearest {}",
                vals[i], avals[j]
            )));
        }
        used[j] = true;
        matched.push(j);
    }

    let xs = DMatrix::from_fn(n, take, |r, c| vecs[(r, chosen[c])]);
    let xs = DMatrix::from_columns(&xs.column_iter().map(|c| c / Complex64::new(c.norm(), 0.0)).collect::<Vec<_>>());
    let ps = DMatrix::from_fn(n, take, |r, c| avecs[(r, matched[c])]);
    let g = ps.transpose() * &xs;
    let sv = g.clone().singular_values();
    let condition = sv.max() / sv.min().max(f64::MIN_POSITIVE);
    let defective = !(condition <= CONDITION_LIMIT);
    let ginv = g.transpose().try_inverse().ok_or_else(|| FsiError::Spectrum("singular bi-orthogonalization".into()))?;
    let left = ps * ginv;

    let ac = complexify(a);
    let aac = complexify(sys.a_adjoint());
    let mut clusters = vec![0usize; take];
    let mut next_id = 0;
    for c in 0..take {
        clusters[c] = match (0..c).find(|&d| close(vals[chosen[d]], vals[chosen[c]])) {
            Some(d) => clusters[d],
            None => {
                next_id += 1;
                next_id - 1
            }
        };
    }
    let pairs = (0..take)
        .map(|c| {
            let lambda = vals[chosen[c]];
            let right = xs.column(c).into_owned();
            let l = left.column(c).into_owned();
            EigenPair {
                value: lambda,
                residual: residual(&ac, &right, lambda),
                left_residual: residual(&aac, &l, lambda),
                right,
                left: l,
                cluster: clusters[c],
            }
        })
        .collect();
    let all_values = order.iter().map(|&i| vals[i]).collect();
    Ok(Spectrum { pairs, shift, all_values, condition, defective })
}

#[derive(Clone, Debug, Serialize)]
pub struct HautusMode {
    pub re: f64,
    pub im: f64,
    /// `min ||B* eps|| / ||eps||` over the (cluster) eigenspace.
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HautusReport {
    pub sigma: f64,
    pub tol_rel: f64,
    pub modes: Vec<HautusMode>,
    pub min_ratio: f64,
    pub complete: bool,
    pub passed: bool,
}

impl HautusReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,b_star_ratio,pass\n");
        for m in &self.modes {
            s.push_str(&format!("{},{},{},{}\n", fmt_f64(m.re), fmt_f64(m.im), fmt_f64(m.ratio), m.pass));
        }
        s
    }
}

/// Orthonormal basis (Hermitian) of the span of the given columns.
fn orthonormal_columns(cols: &[DVector<Complex64>]) -> Vec<DVector<Complex64>> {
    let mut out: Vec<DVector<Complex64>> = Vec::new();
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &out {
                let p = q.dotc(&v);
                v -= q * p;
            }
        }
        let nv = v.norm();
        if nv > 1e-10 * c.norm() {
            out.push(v / Complex64::new(nv, 0.0));
        }
    }
    out
}

/// Checks `B* eps != 0` for every adjoint eigenvector with `Re lambda >= -sigma`.
pub fn hautus_test<S: LinearControlSystem + ?Sized>(
    sys: &S,
    spectrum: &Spectrum,
    sigma: f64,
    tol_rel: f64,
) -> Result<HautusReport> {
    let complete = spectrum.covers(sigma);
    let tested: Vec<&EigenPair> = spectrum.pairs.iter().filter(|p| p.value.re >= -sigma).collect();
    let mut modes = Vec::with_capacity(tested.len());
    let mut ids: Vec<usize> = tested.iter().map(|p| p.cluster).collect();
    ids.dedup();
    let mut seen = std::collections::BTreeSet::new();
    for cl in ids {
        if !seen.insert(cl) {
            continue;
        }
        let group: Vec<&EigenPair> = tested.iter().filter(|p| p.cluster == cl).copied().collect();
        let basis = orthonormal_columns(&group.iter().map(|p| p.left.clone()).collect::<Vec<_>>());
        let lambda = group[0].value;
        let samples = basis.iter().map(|e| sys.b_star_samples(e, lambda)).collect::<Result<Vec<_>>>()?;
        let rows = samples.first().map(|s| s.len()).unwrap_or(0);
        let ratio = if rows == 0 || basis.is_empty() {
            0.0
        } else {
            let m = DMatrix::from_fn(rows, basis.len(), |r, c| samples[c][r]);
            let sv = m.singular_values();
            if rows < basis.len() {
                0.0
            } else {
                sv.min()
            }
        };
        for p in &group {
            modes.push(HautusMode { re: p.value.re, im: p.value.im, ratio, pass: ratio > tol_rel });
        }
    }
    let min_ratio = modes.iter().map(|m| m.ratio).fold(f64::INFINITY, f64::min);
    let passed = complete && modes.iter().all(|m| m.pass);
    Ok(HautusReport { sigma, tol_rel, modes, min_ratio, complete, passed })
}

/// Real bases of the unstable invariant subspace and the reduced matrices.
#[derive(Clone, Debug)]
pub struct UnstableSubspace {
    pub gamma: f64,
    pub n_gamma: usize,
    pub values: Vec<Complex64>,
    /// Right basis `V` (n x N).
    pub right: DMatrix<f64>,
    /// Left basis `U` (n x N) with `U^T V = I`.
    pub left: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
}

impl UnstableSubspace {
    /// The spectral projection `P_u = V U^T`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.right * self.left.transpose()
    }

    /// Reduced coordinates `U^T W`.
    pub fn reduce(&self, w: &DVector<f64>) -> DVector<f64> {
        self.left.tr_mul(w)
    }
}

/// Counts eigenvalues with `Re lambda > -gamma` and builds the real invariant-subspace bases.
pub fn unstable_mode_count<S: LinearControlSystem + ?Sized>(
    sys: &S,
    spectrum: &Spectrum,
    gamma: f64,
) -> Result<UnstableSubspace> {
    if let Some(z) = spectrum.all_values.iter().find(|z| (z.re + gamma).abs() < 1e-6) {
        return Err(FsiError::Spectrum(format!("eigenvalue {z} lies within 1e-6 of the line Re = -{gamma}")));
    }
    if !spectrum.covers(gamma) {
        return Err(FsiError::Spectrum(format!("spectrum does not cover Re >= -{gamma}; increase the count")));
    }
    let n = sys.dim();
    let sel: Vec<&EigenPair> = spectrum.pairs.iter().filter(|p| p.value.re > -gamma).collect();
    let mut vcols: Vec<DVector<f64>> = Vec::new();
    let mut ucols: Vec<DVector<f64>> = Vec::new();
    let mut values = Vec::new();
    let tol = 1e-10 * spectrum.all_values.iter().map(|z| z.norm()).fold(1.0, f64::max);
    for p in &sel {
        values.push(p.value);
        if p.value.im.abs() <= tol {
            // real eigenvalue: rotate the vector to be real
            let k = (0..p.right.len()).max_by(|&a, &b| p.right[a].norm().total_cmp(&p.right[b].norm())).unwrap_or(0);
            let phase = p.right[k] / Complex64::new(p.right[k].norm(), 0.0);
            vcols.push((&p.right / phase).map(|z| z.re));
            ucols.push((&p.left * phase).map(|z| z.re));
        } else if p.value.im > 0.0 {
            vcols.push(p.right.map(|z| z.re));
            vcols.push(p.right.map(|z| z.im));
            ucols.push(p.left.map(|z| z.re));
            ucols.push(p.left.map(|z| z.im));
        }
    }
    let n_gamma = values.len();
    if vcols.len() != n_gamma {
        return Err(FsiError::Spectrum("unpaired complex eigenvalue in the unstable set".into()));
    }
    if n_gamma == 0 {
        return Ok(UnstableSubspace {
            gamma,
            n_gamma,
            values,
            right: DMatrix::zeros(n, 0),
            left: DMatrix::zeros(n, 0),
            a_u: DMatrix::zeros(0, 0),
            b_u: DMatrix::zeros(0, sys.b().ncols()),
        });
    }
    let v = DMatrix::from_columns(&vcols);
    let u0 = DMatrix::from_columns(&ucols);
    let g = u0.tr_mul(&v);
    let ginv = g.transpose().try_inverse().ok_or_else(|| FsiError::Spectrum("singular left/right pairing".into()))?;
    let u = u0 * ginv;
    let a_u = u.tr_mul(&(sys.a() * &v));
    let b_u = u.tr_mul(sys.b());
    Ok(UnstableSubspace { gamma, n_gamma, values, right: v, left: u, a_u, b_u })
}

/// Eigenvalues of the plate-only system from the per-mode quadratic
/// `lambda^2 + delta kappa^2 lambda + alpha kappa^4 = 0`, two copies per wavenumber.
pub fn plate_quadratic_roots(alpha: f64, delta: f64, length: f64, kmax: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(4 * kmax);
    for k in 1..=kmax {
        let kp = 2.0 * std::f64::consts::PI * k as f64 / length;
        let (b, c) = (delta * kp * kp, alpha * kp.powi(4));
        let disc = Complex64::new(b * b - 4.0 * c, 0.0).sqrt();
        for _ in 0..2 {
            out.push((-b + disc) / 2.0);
            out.push((-b - disc) / 2.0);
        }
    }
    out
}
