use fsistab::geometry::{domain_map, map_jacobian, piola_transform, PlateProfile, ReferenceDomain, TorusGrid};
use fsistab::FsiError;
use proptest::prelude::*;
use std::f64::consts::PI;

fn profile(g: &TorusGrid, a: f64, b: f64) -> PlateProfile {
    PlateProfile::from_fn(g, |s| a * (2.0 * PI * s[0]).sin() + b * (4.0 * PI * s[0]).cos())
}

proptest! {
    #[test]
    fn map_roundtrip_and_determinant(a in -0.4f64..0.4, b in -0.3f64..0.3, c in -0.4f64..0.4, s in 0.0f64..1.0, z in 0.0f64..1.0) {
        let g = TorusGrid::line(1.0, 32).unwrap();
        let (e1, e2) = (profile(&g, a, 0.1), profile(&g, c, b));
        let y = [s, z * (1.0 + e1.eval(&[s], &[0]))];
        let x = domain_map(&e1, &e2, &y).unwrap();
        let back = domain_map(&e2, &e1, &x).unwrap();
        prop_assert!((back[0] - y[0]).abs() <= 1e-12 && (back[1] - y[1]).abs() <= 1e-12);
        let (_, det) = map_jacobian(&e1, &e2, &y).unwrap();
        let expected = (1.0 + e2.eval(&[s], &[0])) / (1.0 + e1.eval(&[s], &[0]));
        prop_assert!((det - expected).abs() <= 1e-10);
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let g = TorusGrid::line(1.0, 32).unwrap();
    let (e1, e2) = (profile(&g, 0.2, 0.05), profile(&g, -0.1, 0.15));
    let y = [0.37, 0.6];
    let (j, _) = map_jacobian(&e1, &e2, &y).unwrap();
    let h = 1e-6;
    for k in 0..2 {
        let mut p = y;
        let mut m = y;
        p[k] += h;
        m[k] -= h;
        let (xp, xm) = (domain_map(&e1, &e2, &p).unwrap(), domain_map(&e1, &e2, &m).unwrap());
        for i in 0..2 {
            assert!((j[(i, k)] - (xp[i] - xm[i]) / (2.0 * h)).abs() < 1e-8);
        }
    }
}

#[test]
fn piola_transport_preserves_flux_through_horizontal_sections() {
    // constant horizontal flow through a deformed channel keeps its flux on the flat domain
    let g = TorusGrid::line(1.0, 16).unwrap();
    let eta = profile(&g, 0.3, 0.0);
    let flat = PlateProfile::zero(&g);
    let u = |_: &[f64]| vec![1.0, 0.0];
    for s in [0.1, 0.25, 0.6] {
        let height = 1.0 + eta.eval(&[s], &[0]);
        let v = piola_transform(&u, &eta, &flat, &[s, 0.5]).unwrap();
        assert!((v[0] - height).abs() < 1e-12, "{} vs {height}", v[0]);
    }
}

#[test]
fn transported_divergence_free_field_converges_spectrally() {
    let stream = |x: &[f64]| {
        let k = 2.0 * PI;
        let d = 1.5 + (k * x[0]).cos();
        vec![2.0 * x[1] / d, -x[1] * x[1] * k * (k * x[0]).sin() / (d * d)]
    };
    let res: Vec<f64> = [8, 16, 24]
        .iter()
        .map(|&n| {
            let g = TorusGrid::line(1.0, n).unwrap();
            let dom = ReferenceDomain::flat(&g, 12).unwrap();
            let u = dom.piola_field(&stream, &profile(&g, 0.2, 0.0)).unwrap();
            let scale = u.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            dom.divergence(&u).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
        })
        .collect();
    assert!(res[0] / res[1] >= 10.0 && res[1] / res[2] >= 10.0, "{res:?}");
}

#[test]
fn profiles_touching_the_bottom_are_rejected() {
    let g = TorusGrid::line(1.0, 16).unwrap();
    let bad = profile(&g, 1.2, 0.0);
    assert!(matches!(bad.check_admissible(), Err(FsiError::InadmissibleProfile { .. })));
    assert!(matches!(ReferenceDomain::new(&bad, 8), Err(FsiError::InadmissibleProfile { .. })));
}
