mod common;

use koopsim::linalg::{matpow, Matrix};
use koopsim::spectra::{classify, fixed_point_projector, oscillation_term, ConvergenceClass, DEFAULT_EIG_TOL};

#[test]
fn classify_agrees_with_matrix_powers() {
    for (i, c) in common::family(11, 200, 6, 50.0).iter().enumerate() {
        let report = classify(&c.a, DEFAULT_EIG_TOL).unwrap();
        let (brute, power) = common::brute_force_class(&c.a);
        assert_eq!(report.class, brute, "instance {i}: {:?}", c.d);
        assert_eq!(report.class, c.intended, "instance {i}");
        if report.class == ConvergenceClass::ConvergesToFixedPoint {
            let p = report.projector.as_ref().unwrap();
            let err = power.sub(p).unwrap().frobenius_norm();
            assert!(err <= 1e-6 * p.frobenius_norm().max(1.0), "instance {i}: {err}");
        }
    }
}

#[test]
fn projector_is_idempotent_and_invariant() {
    for c in common::family(5, 60, 6, 50.0) {
        if c.intended != ConvergenceClass::ConvergesToFixedPoint {
            continue;
        }
        let p = fixed_point_projector(&c.a, DEFAULT_EIG_TOL).unwrap();
        let pn = p.frobenius_norm();
        let p2 = p.matmul(&p).unwrap();
        assert!(p2.sub(&p).unwrap().frobenius_norm() <= 1e-8 * pn);
        let ap = c.a.matmul(&p).unwrap();
        assert!(ap.sub(&p).unwrap().frobenius_norm() <= 1e-8 * pn);
    }
}

#[test]
fn oscillation_term_tracks_matrix_powers() {
    for (i, c) in common::family(23, 150, 6, 50.0).iter().enumerate() {
        if c.intended != ConvergenceClass::ConvergesToInvariantSet {
            continue;
        }
        for l in [64u64, 128, 256] {
            let m = oscillation_term(&c.a, l, DEFAULT_EIG_TOL).unwrap();
            let err = matpow(&c.a, l).unwrap().sub(&m).unwrap().frobenius_norm();
            let bound = 2.0 * c.rho_sub.powi(l as i32) * c.cond_u;
            assert!(err <= bound, "instance {i}, l={l}: err {err:e} > bound {bound:e}");
        }
    }
}

#[test]
fn defective_unit_eigenvalue_under_similarity_is_unstable() {
    // Jordan block at 1 hidden behind a similarity transform: the QR
    // eigenvalues split by ~sqrt(eps), the rank test must still catch it.
    let j = Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]]).unwrap();
    let u = Matrix::from_rows(&[[1.0, 0.3, -0.2], [0.1, 1.0, 0.4], [-0.3, 0.2, 1.0]]).unwrap();
    let a = u.matmul(&j).unwrap().matmul(&koopsim::linalg::inverse(&u).unwrap()).unwrap();
    let r = classify(&a, DEFAULT_EIG_TOL).unwrap();
    assert_eq!(r.class, ConvergenceClass::Unstable, "{:?}", r.eigenvalues);
}

#[test]
fn scaled_rotations_are_unstable() {
    for c in common::family(3, 30, 6, 50.0) {
        if c.intended == ConvergenceClass::ConvergesToOrigin {
            continue;
        }
        let scaled = c.a.scale(1.1);
        assert_eq!(classify(&scaled, DEFAULT_EIG_TOL).unwrap().class, ConvergenceClass::Unstable);
        assert_eq!(common::brute_force_class(&scaled).0, ConvergenceClass::Unstable);
    }
}
