use fsistab::discretization::{assemble_plate_ops, DiscreteSystem, LinearControlSystem, MatrixSystem, SystemSpec};
use fsistab::spectral_analysis::{compute_spectrum, hautus_test, plate_quadratic_roots, unstable_mode_count};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::sync::OnceLock;

fn default_system() -> &'static DiscreteSystem {
    static S: OnceLock<DiscreteSystem> = OnceLock::new();
    S.get_or_init(|| DiscreteSystem::build(&SystemSpec::default()).unwrap())
}

fn scalar(a: f64, b: f64) -> MatrixSystem {
    MatrixSystem::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
}

#[test]
fn plate_only_spectrum_matches_quadratic_formula() {
    let ops = assemble_plate_ops(1.0, 0.5, 1.0, 7);
    let sys = MatrixSystem::new(ops.generator(), DMatrix::zeros(28, 1));
    let spec = compute_spectrum(&sys, 28, 0.0).unwrap();
    let mut expected = plate_quadratic_roots(1.0, 0.5, 1.0, 7);
    for p in &spec.pairs {
        let (k, _) = expected
            .iter()
            .enumerate()
            .map(|(k, z)| (k, (z - p.value).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((expected[k] - p.value).norm() <= 1e-8 * p.value.norm().max(1.0), "{} vs {}", p.value, expected[k]);
        expected.remove(k);
        assert!(p.residual <= 1e-8);
    }
    assert!(expected.is_empty());
}

#[test]
fn spectrum_is_conjugate_closed_with_small_residuals() {
    let sys = default_system();
    let spec = compute_spectrum(sys, 40, 0.0).unwrap();
    assert!(spec.pairs.len() >= 40);
    for p in &spec.pairs {
        assert!(p.residual <= 1e-8 && p.left_residual <= 1e-8, "{} {} {}", p.value, p.residual, p.left_residual);
        assert!((p.right.norm() - 1.0).abs() < 1e-12);
        if p.value.im.abs() > 1e-8 {
            assert!(spec.pairs.iter().any(|q| (q.value - p.value.conj()).norm() < 1e-8 * p.value.norm()));
        }
    }
    let take = spec.pairs.len();
    let g = DMatrix::from_fn(take, take, |i, j| spec.pairs[i].left.dot(&spec.pairs[j].right));
    assert!((g - DMatrix::<Complex64>::identity(take, take)).norm() < 1e-8);
}

#[test]
fn scalar_toy_hautus_passes_and_zero_control_fails() {
    let good = scalar(1.0, 1.0);
    let spec = compute_spectrum(&good, 1, 0.0).unwrap();
    let rep = hautus_test(&good, &spec, 2.0, 1e-6).unwrap();
    assert!(rep.passed && rep.complete);
    let bad = scalar(1.0, 0.0);
    let spec = compute_spectrum(&bad, 1, 0.0).unwrap();
    let rep = hautus_test(&bad, &spec, 2.0, 1e-6).unwrap();
    assert!(!rep.passed);
    assert_eq!(rep.min_ratio, 0.0);
}

#[test]
fn hautus_sees_whole_degenerate_eigenspaces() {
    // two identical unstable modes with a single actuator cannot be stabilized
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, -5.0]));
    let b = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
    let sys = MatrixSystem::new(a, b);
    let spec = compute_spectrum(&sys, 3, 0.0).unwrap();
    let rep = hautus_test(&sys, &spec, 2.0, 1e-6).unwrap();
    assert!(!rep.passed);
    assert!(rep.min_ratio < 1e-12);
}

#[test]
fn incomplete_spectrum_is_reported() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, -0.5, -9.0]));
    let sys = MatrixSystem::new(a, DMatrix::from_element(4, 1, 1.0));
    let spec = compute_spectrum(&sys, 2, 0.0).unwrap();
    let rep = hautus_test(&sys, &spec, 2.0, 1e-6).unwrap();
    assert!(!rep.complete && !rep.passed);
    assert!(unstable_mode_count(&sys, &spec, 2.0).is_err());
}

#[test]
fn default_configuration_passes_hautus_stably_under_refinement() {
    let sys = default_system();
    let spec = compute_spectrum(sys, 20, 0.0).unwrap();
    let rep = hautus_test(sys, &spec, 2.0, 1e-6).unwrap();
    assert!(rep.passed, "{rep:?}");
    let fine = DiscreteSystem::build(&SystemSpec::default().refined()).unwrap();
    let fspec = compute_spectrum(&fine, 20, 0.0).unwrap();
    let frep = hautus_test(&fine, &fspec, 2.0, 1e-6).unwrap();
    assert!(frep.passed);
    let ratio = frep.min_ratio / rep.min_ratio;
    assert!((0.8..=1.2).contains(&ratio), "ratio {ratio}");
    // rightmost eigenvalues are resolved
    for (a, b) in spec.pairs.iter().zip(&fspec.pairs).take(10) {
        assert!((a.value - b.value).norm() <= 1e-2 * b.value.norm(), "{} vs {}", a.value, b.value);
    }
}

#[test]
fn unstable_subspace_for_default_rate() {
    let sys = default_system();
    let spec = compute_spectrum(sys, 20, 0.0).unwrap();
    let sub = unstable_mode_count(sys, &spec, 2.0).unwrap();
    let brute = spec.all_values.iter().filter(|z| z.re > -2.0).count();
    assert_eq!(sub.n_gamma, brute);
    assert!(sub.n_gamma >= 2);
    let p = sub.projector();
    assert!((&p * &p - &p).norm() <= 1e-8 * p.norm());
    let comm = &p * sys.a() - sys.a() * &p;
    assert!(comm.norm() <= 1e-6 * sys.a().norm());
    let utv = sub.left.tr_mul(&sub.right);
    assert!((utv - DMatrix::identity(sub.n_gamma, sub.n_gamma)).norm() < 1e-8);
    let (vals, _) = fsistab::numerics::eigen_dense(&sub.a_u).unwrap();
    assert!(vals.iter().all(|z| z.re > -2.0));
}

#[test]
fn stable_system_below_rate_has_no_unstable_modes() {
    let sys = scalar(-3.0, 1.0);
    let spec = compute_spectrum(&sys, 1, 0.0).unwrap();
    assert_eq!(unstable_mode_count(&sys, &spec, 2.0).unwrap().n_gamma, 0);
    let edge = scalar(-2.0, 1.0);
    let spec = compute_spectrum(&edge, 1, 0.0).unwrap();
    assert!(unstable_mode_count(&edge, &spec, 2.0).is_err());
}

#[test]
fn shift_does_not_change_eigenvalues() {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -4.0, -0.1, 0.0, 0.0, 0.0, -1.0]);
    let sys = MatrixSystem::new(a, DMatrix::from_element(3, 1, 1.0));
    let s0 = compute_spectrum(&sys, 3, 0.0).unwrap();
    let s1 = compute_spectrum(&sys, 3, -0.7).unwrap();
    for (a, b) in s0.pairs.iter().zip(&s1.pairs) {
        assert!((a.value - b.value).norm() < 1e-12);
    }
    assert_eq!(s1.shift, -0.7);
}
