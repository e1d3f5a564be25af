use fsistab::delay_control::{
    artstein_reduce, controllability_rank, export_kernel, law_from_subspace, place_poles, synthesize, ControlForm,
    DelayRuntime, FeedbackLaw,
};
use fsistab::discretization::MatrixSystem;
use fsistab::numerics::eigen_dense;
use fsistab::spectral_analysis::{compute_spectrum, unstable_mode_count};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_law(t0: f64, margin: f64) -> FeedbackLaw {
    let sys = MatrixSystem::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0));
    let spec = compute_spectrum(&sys, 1, 0.0).unwrap();
    synthesize(&sys, &spec, 2.0, t0, margin, 1e-6).unwrap()
}

#[test]
fn scalar_artstein_reduction_and_gain() {
    let bt = artstein_reduce(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), 0.5).unwrap();
    assert!((bt[(0, 0)] - 0.60653).abs() < 1e-5);
    let law = scalar_law(0.5, 0.0);
    assert!((law.gain[(0, 0)] * law.b_u[(0, 0)] * law.modes[(0, 0)] - -4.9462).abs() < 1e-4 * 4.9462);
    let cl = law.closed_loop_eigenvalues().unwrap();
    assert!((cl[0] - Complex64::new(-2.0, 0.0)).norm() < 1e-10);
}

#[test]
fn zero_delay_reduction_is_identity() {
    let a = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -1.0, 0.2]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    assert_eq!(artstein_reduce(&a, &b, 0.0).unwrap(), b);
    assert!(artstein_reduce(&a, &b, -0.1).is_err());
}

#[test]
fn embedded_scalar_gain_acts_only_on_unstable_coordinate() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -5.0]));
    let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let sys = MatrixSystem::new(a, b);
    let spec = compute_spectrum(&sys, 2, 0.0).unwrap();
    let law = synthesize(&sys, &spec, 2.0, 0.5, 0.0, 1e-6).unwrap();
    assert_eq!(law.n_gamma, 1);
    let full = &law.gain * law.modes.transpose();
    assert!((full[(0, 0)] - -4.9462).abs() < 1e-4 * 4.9462, "{full}");
    assert!(full[(0, 1)].abs() < 1e-12);
}

fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(n, n) * 0.5;
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    (a, b)
}

#[test]
fn random_multi_input_placement_hits_requested_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (a, b) = random_system(&mut rng, 4, 2);
        let (gamma, margin) = (1.0, 0.3);
        let f = place_poles(&a, &b, gamma, margin).unwrap();
        let (open, _) = eigen_dense(&a).unwrap();
        let want: Vec<Complex64> = open
            .iter()
            .map(|z| if z.re > -(gamma + margin) { Complex64::new(-(gamma + margin), z.im) } else { *z })
            .collect();
        // coinciding targets form Jordan blocks, so compare characteristic polynomials
        let got = char_poly(&(&a + &b * &f));
        let expect = poly_from_roots(&want);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-6 * e.abs().max(1.0), "{got:?} vs {expect:?}");
        }
    }
}

/// Faddeev-LeVerrier coefficients c_0..c_{n-1} of det(sI - A) = s^n + ... + c_0.
fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut c = vec![0.0; n];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut prev = 1.0;
    for k in 1..=n {
        m = a * &m + DMatrix::identity(n, n) * prev;
        prev = -(a * &m).trace() / k as f64;
        c[n - k] = prev;
    }
    c
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
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

#[test]
fn repeated_modes_need_enough_inputs() {
    let a = DMatrix::identity(2, 2);
    let f = place_poles(&a, &DMatrix::identity(2, 2), 2.0, 0.4).unwrap();
    let (closed, _) = eigen_dense(&(&a + &f)).unwrap();
    assert!(closed.iter().all(|z| (z - Complex64::new(-2.4, 0.0)).norm() < 1e-8));
    let single = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    assert_eq!(controllability_rank(&a, &single), 1);
    assert!(place_poles(&a, &single, 2.0, 0.4).is_err());
}

#[test]
fn artstein_reduction_preserves_controllability() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (a, b) = random_system(&mut rng, 4, 1);
        let bt = artstein_reduce(&a, &b, 0.7).unwrap();
        assert_eq!(controllability_rank(&a, &b), controllability_rank(&a, &bt));
    }
}

#[test]
fn already_fast_modes_give_zero_gain() {
    let sys = MatrixSystem::new(DMatrix::from_element(1, 1, -3.0), DMatrix::from_element(1, 1, 1.0));
    let spec = compute_spectrum(&sys, 1, 0.0).unwrap();
    let law = synthesize(&sys, &spec, 2.0, 0.5, 0.4, 1e-6).unwrap();
    assert_eq!(law.n_gamma, 0);
    assert_eq!(law.gain.len(), 0);
}

#[test]
fn uncontrollable_system_is_refused() {
    let sys = MatrixSystem::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.0));
    let spec = compute_spectrum(&sys, 1, 0.0).unwrap();
    assert!(synthesize(&sys, &spec, 2.0, 0.5, 0.4, 1e-6).is_err());
    let sub = unstable_mode_count(&sys, &spec, 2.0).unwrap();
    assert!(law_from_subspace(&sub, 1, 0.5, 0.4).is_err());
}

#[test]
fn law_roundtrips_through_json() {
    let law = scalar_law(0.5, 0.4);
    let back = FeedbackLaw::from_json(&law.to_json().unwrap()).unwrap();
    assert_eq!(back.gain, law.gain);
    assert_eq!(back.b_tilde, law.b_tilde);
    assert_eq!(back.modes, law.modes);
    assert_eq!(back.t0, law.t0);
}

/// Crank-Nicolson on the scalar plant `z' = a z + b v` with the delayed law.
fn run_scalar(law: &FeedbackLaw, form: ControlForm, dt: f64, t_end: f64) -> Vec<f64> {
    let mut rt = DelayRuntime::new(law, form, dt).unwrap();
    let steps = (t_end / dt).round() as usize;
    let (a, b) = (law.a_u[(0, 0)], law.b_u[(0, 0)]);
    let mut z = 1.0;
    let mut out = vec![z];
    rt.record_state(DVector::from_element(1, z));
    let mut v = rt.control(0).unwrap()[0];
    for n in 0..steps {
        if rt.is_instantaneous() {
            let g = law.gain[(0, 0)] * law.modes[(0, 0)];
            z = (z * (1.0 + 0.5 * dt * a) + 0.5 * dt * b * v) / (1.0 - 0.5 * dt * (a + b * g));
            rt.record_state(DVector::from_element(1, z));
            v = rt.control(n + 1).unwrap()[0];
        } else {
            let next = rt.control(n + 1).unwrap();
            let right = rt.left_limit(n + 1, &next)[0];
            z = (z * (1.0 + 0.5 * dt * a) + 0.5 * dt * b * (v + right)) / (1.0 - 0.5 * dt * a);
            rt.record_state(DVector::from_element(1, z));
            v = next[0];
        }
        out.push(z);
    }
    out
}

#[test]
fn recursion_and_kernel_forms_agree() {
    for t0 in [0.5, 0.0] {
        let law = scalar_law(t0, 0.4);
        let r = run_scalar(&law, ControlForm::Recursion, 0.01, 10.0);
        let k = run_scalar(&law, ControlForm::Kernel, 0.01, 10.0);
        let scale = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let gap = r.iter().zip(&k).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(gap <= 1e-8 * scale, "t0={t0}: gap {gap}");
        // closed loop decays at the assigned rate 2.4
        let tail = r[r.len() - 1].abs() / r[r.len() - 201].abs();
        let rate = -tail.ln() / 2.0;
        assert!((rate - 2.4).abs() < 0.05, "rate {rate}");
    }
}

#[test]
fn zero_delay_is_memoryless_feedback() {
    let law = scalar_law(0.0, 0.4);
    let mut rt = DelayRuntime::new(&law, ControlForm::Kernel, 0.01).unwrap();
    let f = law.gain[(0, 0)] * law.modes[(0, 0)];
    for n in 0..50 {
        let z = (n as f64 * 0.3).sin();
        rt.record_state(DVector::from_element(1, law.modes[(0, 0)] * z));
        let v = rt.control(n).unwrap()[0];
        assert!((v - f * z).abs() <= 1e-8 * f.abs());
    }
}

#[test]
fn exported_kernel_matches_closed_form_resolvent() {
    // for a=b=1, F b~ = -3: R(r) = -3 exp(-2 r) on [0, t0)
    let law = scalar_law(0.5, 0.0);
    let table = export_kernel(&law, 1e-3, 1.0).unwrap();
    let fu = law.gain[(0, 0)] * law.modes[(0, 0)];
    for r in [0.0, 0.1, 0.25, 0.4] {
        let k = table.kernel(0.7 + r, 0.7)[(0, 0)] / fu;
        let exact = -3.0 * (-2.0 * r).exp();
        assert!((k - exact).abs() < 1e-4 * 3.0, "r={r}: {k} vs {exact}");
    }
    assert_eq!(table.kernel(0.1, 0.2).norm(), 0.0);
}

#[test]
fn delay_must_be_resolved_by_the_step() {
    let law = scalar_law(0.5, 0.4);
    assert!(DelayRuntime::new(&law, ControlForm::Recursion, 0.3).is_err());
    assert!(DelayRuntime::new(&law, ControlForm::Recursion, 0.2).is_err());
    assert!(DelayRuntime::new(&law, ControlForm::Recursion, 0.125).is_ok());
}
