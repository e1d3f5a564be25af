use fsistab::discretization::{
    assemble_plate_ops, Basis, BodyForce, DiscreteSystem, Galerkin, LinearControlSystem, SystemSpec,
};
use fsistab::numerics::eigen_dense;
use fsistab::transform_ops::Physics;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn small_spec(force: BodyForce) -> SystemSpec {
    SystemSpec { n_modes: 8, n_vertical: 12, force, ..SystemSpec::default() }
}

fn rest_system() -> &'static DiscreteSystem {
    static S: OnceLock<DiscreteSystem> = OnceLock::new();
    S.get_or_init(|| DiscreteSystem::build(&small_spec(BodyForce::Zero)).unwrap())
}

fn cell_system() -> &'static DiscreteSystem {
    static S: OnceLock<DiscreteSystem> = OnceLock::new();
    S.get_or_init(|| DiscreteSystem::build(&small_spec(BodyForce::Cell(0.5))).unwrap())
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

#[test]
fn basis_is_orthonormal_and_satisfies_constraints() {
    let basis = Basis::new(1.0, 8, 12, 1.0).unwrap();
    assert_eq!(basis.n, 12 + 3 * 24);
    for b in &basis.blocks {
        let g = b.e.transpose() * &b.gram * &b.e;
        assert!(rel(&g, &DMatrix::identity(b.len, b.len)) < 1e-11);
        if b.k > 0 {
            assert!((&b.constraints * &b.e).amax() < 1e-10);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = DVector::from_fn(basis.n, |_, _| rng.random_range(-1.0..1.0));
    let raw = basis.raw(&c);
    assert!(basis.constraint_residual(&raw) < 1e-10);
    assert!((basis.coords(&raw) - &c).norm() < 1e-10 * c.norm());
    assert!((basis.raw_inner(&raw, &raw) - c.norm_squared()).abs() < 1e-10 * c.norm_squared());
}

#[test]
fn projector_is_idempotent_and_energy_symmetric() {
    let basis = Basis::new(1.0, 8, 10, 1.0).unwrap();
    let p = basis.projector_raw();
    assert!(rel(&(&p * &p), &p) < 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = DVector::from_fn(basis.n_raw, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(basis.n_raw, |_, _| rng.random_range(-1.0..1.0));
    let lhs = basis.raw_inner(&(&p * &x), &y);
    let rhs = basis.raw_inner(&x, &(&p * &y));
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn sampled_basis_is_divergence_free_with_matching_normal_traces() {
    let g = Galerkin::new(1.0, 8, 12, Physics::default()).unwrap();
    let ev = &g.eval;
    let div = &ev.ux[0] + &ev.uy[1];
    assert!(div.amax() < 1e-9, "divergence {}", div.amax());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = DVector::from_fn(g.n(), |_, _| rng.random_range(-1.0..1.0));
    let u = ev.velocity(&c);
    let (_, x2) = g.basis.plate_coeffs(&c);
    let prof = g.quad.profile(&x2, 1.0);
    let nz = g.quad.nz();
    for ix in 0..g.quad.nx() {
        assert!(u[1][ix * nz].abs() < 1e-10);
        assert!((u[1][ix * nz + nz - 1] - prof.values[ix]).abs() < 1e-10);
    }
}

#[test]
fn plate_symbols_match_closed_form() {
    let ops = assemble_plate_ops(1.0, 0.5, 1.0, 3);
    assert!((ops.a1[0] - 1558.545).abs() < 1e-3);
    assert!((ops.a2[0] - 0.5 * (2.0 * std::f64::consts::PI).powi(2)).abs() < 1e-12);
    assert!((ops.a1_pow(0.5)[1] - (4.0 * std::f64::consts::PI).powi(2)).abs() < 1e-9);
    let (vals, _) = eigen_dense(&ops.generator()).unwrap();
    assert!(vals.iter().all(|z| z.re < 0.0));
}

#[test]
fn rest_state_generator_is_dissipative() {
    let sys = rest_system();
    let s = &sys.stiffness;
    let sym = (s + s.transpose()) * 0.5;
    assert!(rel(&sym, &sys.dissipation) < 1e-10);
    let ev = sym.symmetric_eigen();
    assert!(ev.eigenvalues.max() < 1e-10);
    let (vals, _) = eigen_dense(s).unwrap();
    assert!(vals.iter().all(|z| z.re < 0.0), "max real part {}", vals.iter().map(|z| z.re).fold(f64::MIN, f64::max));
}

#[test]
fn adjoint_matches_transpose() {
    for sys in [rest_system(), cell_system()] {
        let r = rel(&sys.adjoint, &sys.stiffness.transpose());
        assert!(r < 1e-9, "adjoint mismatch {r}");
    }
}

#[test]
fn control_weight_preserves_zero_flux() {
    let sys = rest_system();
    let shape = &sys.shape;
    assert!((shape.integral(&shape.m) - 1.0).abs() < 1e-12);
    assert_eq!(shape.actuators.len(), 5);
    for j in 0..shape.actuators.len() {
        assert!(shape.flux(&shape.actuator(j)).abs() < 1e-12);
    }
    let l = shape.length;
    for (x, m) in shape.x.iter().zip(&shape.m) {
        if *x < l / 3.0 - 1e-12 || *x > 2.0 * l / 3.0 + 1e-12 {
            assert_eq!(*m, 0.0);
        }
    }
    let p = Physics { beta1: 0.0, ..Physics::default() };
    let sys0 = DiscreteSystem::build(&SystemSpec { physics: p, ..small_spec(BodyForce::Zero) }).unwrap();
    assert_eq!(sys0.shape.actuators.len(), 2);
}

#[test]
fn control_operator_is_dual_to_boundary_observation() {
    let fine = DiscreteSystem::build(&SystemSpec { force: BodyForce::Cell(0.5), ..SystemSpec::default() }).unwrap();
    for (sys, tol) in [(rest_system(), 2e-2), (cell_system(), 2e-2), (&fine, 1e-7)] {
        let (vals, vecs) = eigen_dense(&sys.adjoint).unwrap();
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].re.partial_cmp(&vals[a].re).unwrap());
        for &i in order.iter().take(4) {
            let psi = vecs.column(i).into_owned();
            let bs = sys.b_star(&psi, vals[i]);
            for j in 0..sys.control.ncols() {
                let lhs: Complex64 = (0..sys.n()).map(|r| psi[r] * sys.control[(r, j)]).sum();
                let rhs = sys.b_star_pairing(j, &bs);
                let scale = lhs.norm().max(rhs.norm()).max(1e-3 * psi.norm());
                assert!((lhs - rhs).norm() < tol * scale, "mode {i} actuator {j}: {lhs} vs {rhs}");
            }
        }
    }
}

#[test]
fn shear_steady_state_matches_robin_profile() {
    let a = 0.3;
    let g = Galerkin::new(1.0, 8, 12, Physics::default()).unwrap();
    let st = g.steady_state_solve(&BodyForce::Shear(a), None).unwrap();
    let p = g.physics;
    let c0 = a * (1.0 + p.beta2 / (2.0 * p.nu)) / (p.beta1 + p.beta2 + p.beta1 * p.beta2 / p.nu);
    let c1 = p.beta1 * c0 / p.nu;
    let u = g.eval.velocity(&st.coords);
    let nz = g.quad.nz();
    for ix in 0..g.quad.nx() {
        for iz in 0..nz {
            let y = g.quad.domain.zeta[iz];
            let exact = -a / (2.0 * p.nu) * y * y + c1 * y + c0;
            assert!((u[0][ix * nz + iz] - exact).abs() < 1e-9);
            assert!(u[1][ix * nz + iz].abs() < 1e-9);
        }
    }
    assert!(st.h_s.iter().all(|v| v.abs() < 1e-8));
    assert!(st.residual <= 1e-10);
}

#[test]
fn cell_forcing_newton_converges_quadratically() {
    let st = &cell_system().steady;
    let log = &st.newton_log;
    assert!(log.len() >= 3 && *log.last().unwrap() <= 1e-10);
    assert!(log[2] < 1e-2 * log[1] || log[2] < 1e-10);
}

#[test]
fn body_force_descriptors_roundtrip() {
    for f in [BodyForce::Zero, BodyForce::Shear(0.25), BodyForce::Cell(-1.5)] {
        assert_eq!(BodyForce::parse(&f.descriptor()).unwrap(), f);
    }
    assert!(BodyForce::parse("vortex:1").is_err());
}

#[test]
fn export_import_roundtrip_and_tamper_detection() {
    let sys = rest_system();
    let dir = std::env::temp_dir().join(format!("fsistab-export-{}", std::process::id()));
    let manifest = sys.export(&dir).unwrap();
    let (m2, ms) = DiscreteSystem::import(&dir).unwrap();
    assert_eq!(manifest, m2);
    assert_eq!(&ms.a, sys.a());
    assert_eq!(&ms.b, sys.b());
    let path = dir.join("control.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen('1', "2", 1)).unwrap();
    assert!(DiscreteSystem::import(&dir).is_err());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn smallest_grid_has_full_rank_constraints() {
    let basis = Basis::new(1.0, 4, 6, 1.0).unwrap();
    assert_eq!(basis.kmax, 1);
    assert_eq!(basis.n, 6 + 12);
    assert!(Basis::new(1.0, 5, 6, 1.0).is_err());
}

#[test]
fn plate_symbol_powers_and_zero_damping() {
    let ops = assemble_plate_ops(2.0, 0.0, 1.5, 4);
    for (h, a) in ops.a1_pow(0.5).iter().zip(&ops.a1) {
        assert!((h * h - a).abs() < 1e-10 * a);
    }
    for ((q, t), a) in ops.a1_pow(0.25).iter().zip(ops.a1_pow(0.75)).zip(&ops.a1) {
        assert!((q * t - a).abs() < 1e-10 * a);
    }
    assert!(ops.a2.iter().all(|v| *v == 0.0));
}

#[test]
fn frictionless_stokes_beam_is_stable_apart_from_uniform_slip() {
    let physics = Physics { beta1: 0.0, beta2: 0.0, ..Physics::default() };
    let sys = DiscreteSystem::build(&SystemSpec { physics, ..small_spec(BodyForce::Zero) }).unwrap();
    let (vals, _) = eigen_dense(&sys.stiffness).unwrap();
    let neutral = vals.iter().filter(|z| z.norm() < 1e-9).count();
    assert_eq!(neutral, 1);
    assert!(vals.iter().filter(|z| z.norm() >= 1e-9).all(|z| z.re < 0.0));
}

#[test]
fn random_pairs_satisfy_adjoint_and_dissipativity_bounds() {
    let sys = cell_system();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = sys.n();
    for _ in 0..100 {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let lhs = (&sys.stiffness * &x).dot(&y);
        let rhs = x.dot(&(&sys.adjoint * &y));
        assert!((lhs - rhs).abs() <= 1e-8 * x.norm() * y.norm() * sys.stiffness.norm().max(1.0));
        let q = sys.lambda0 * x.norm_squared() - (&sys.stiffness * &x).dot(&x);
        assert!(q >= 0.0);
    }
}

#[test]
fn weight_operator_on_random_boundary_data() {
    let shape = &rest_system().shape;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let v: Vec<[f64; 2]> =
            shape.x.iter().map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        assert!(shape.flux(&v).abs() < 1e-12);
    }
    // data with vanishing weighted flux is only multiplied by m
    let v: Vec<[f64; 2]> = shape.x.iter().map(|x| [0.0, (2.0 * std::f64::consts::PI * (x - 0.5)).sin()]).collect();
    let flux: f64 = shape.integral(&v.iter().zip(&shape.m).map(|(a, m)| a[1] * m).collect::<Vec<_>>());
    assert!(flux.abs() < 1e-12);
    for ((a, b), m) in shape.apply(&v).iter().zip(&v).zip(&shape.m) {
        assert!((a[1] - m * b[1]).abs() < 1e-12);
    }
}
