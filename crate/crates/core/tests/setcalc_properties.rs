use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tubempc::polytope::Polytope;
use tubempc::setcalc::{self, TubeDesign};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Bounded 2-D polytope: a box cut by random halfspaces that keep the origin.
fn polytope2() -> impl Strategy<Value = Polytope> {
    (
        prop::collection::vec(0.5f64..3.0, 4),
        prop::collection::vec((0.0f64..std::f64::consts::TAU, 0.3f64..2.0), 0..5),
    )
        .prop_map(|(bx, cuts)| {
            let mut p = Polytope::from_box(&[-bx[0], -bx[1]], &[bx[2], bx[3]]).unwrap();
            for (th, off) in cuts {
                let c = Polytope::new(DMatrix::from_row_slice(1, 2, &[th.cos(), th.sin()]), v(&[off])).unwrap();
                p = p.intersect(&c).unwrap();
            }
            p.reduce()
        })
}

fn direction() -> impl Strategy<Value = DVector<f64>> {
    (0.0f64..std::f64::consts::TAU).prop_map(|t| v(&[t.cos(), t.sin()]))
}

/// `Acl` with spectral radius at most `rho`.
fn stable(m: &[f64], rho: f64) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(2, 2, m);
    let s = a.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    if s > rho {
        a * (rho / s)
    } else {
        a
    }
}

fn support_gap(p: &Polytope, q: &Polytope, dirs: &[DVector<f64>]) -> f64 {
    dirs.iter().map(|d| (p.support(d).unwrap() - q.support(d).unwrap()).abs()).fold(0.0, f64::max)
}

fn dirs(n: usize) -> Vec<DVector<f64>> {
    (0..n).map(|i| i as f64 * std::f64::consts::TAU / n as f64).map(|t| v(&[t.cos(), t.sin()])).collect()
}

/// Inputs `u ∈ [lo, hi]` with `a_i (A x + B u) <= b_i` for every row, as an
/// interval; independent of the library's LP.
fn admissible_inputs(omega: &Polytope, a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DVector<f64>, lo: f64, hi: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (lo, hi);
    let ax = a * x;
    for i in 0..omega.nrows() {
        let row = omega.a().row(i);
        let coef = (row * b)[0];
        let rest = omega.b()[i] - (row * &ax)[0];
        if coef.abs() < 1e-14 {
            if rest < -1e-9 {
                return (1.0, 0.0);
            }
        } else if coef > 0.0 {
            hi = hi.min(rest / coef);
        } else {
            lo = lo.max(rest / coef);
        }
    }
    (lo, hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sum_and_difference_bracket(p in polytope2(), q in polytope2(), s in 0.05f64..0.5) {
        let q = q.scale(s);
        let back = p.minkowski_sum(&q).unwrap().pontryagin_diff(&q).unwrap();
        let d = dirs(64);
        for dir in &d {
            prop_assert!(back.support(dir).unwrap() >= p.support(dir).unwrap() - 1e-9);
        }
        let diff = p.pontryagin_diff(&q).unwrap();
        if !diff.is_empty() {
            let again = diff.minkowski_sum(&q).unwrap();
            for dir in &d {
                prop_assert!(again.support(dir).unwrap() <= p.support(dir).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn support_is_sublinear(p in polytope2(), d1 in direction(), d2 in direction(), s in 0.1f64..3.0) {
        let h = |d: &DVector<f64>| p.support(d).unwrap();
        prop_assert!(h(&(&d1 + &d2)) <= h(&d1) + h(&d2) + 1e-9);
        prop_assert!((h(&(&d1 * s)) - s * h(&d1)).abs() <= 1e-9 * (1.0 + s * h(&d1).abs()));
    }

    #[test]
    fn affine_maps_compose(p in polytope2(), m1 in prop::collection::vec(-2.0f64..2.0, 4), m2 in prop::collection::vec(-2.0f64..2.0, 4)) {
        let m1 = DMatrix::from_row_slice(2, 2, &m1) + DMatrix::identity(2, 2) * 0.1;
        let m2 = DMatrix::from_row_slice(2, 2, &m2);
        let twice = p.affine_map(&m1).unwrap().affine_map(&m2).unwrap();
        let once = p.affine_map(&(&m2 * &m1)).unwrap();
        let scale = 1.0 + once.bounding_box().unwrap().1.amax();
        prop_assert!(support_gap(&twice, &once, &dirs(64)) <= 1e-9 * scale * 10.0);
    }

    #[test]
    fn rpi_certificate_holds(m in prop::collection::vec(-1.0f64..1.0, 4), rho in 0.2f64..0.8, w in prop::collection::vec(0.1f64..1.0, 2)) {
        let acl = stable(&m, rho);
        let ws = Polytope::symmetric_box(&w).unwrap();
        let e = setcalc::rpi_outer(&acl, &ws, 0.05, 1e-9).unwrap();
        // Direct check, then the packaged certificate.
        let image = e.set.affine_map(&acl).unwrap().minkowski_sum(&ws).unwrap();
        prop_assert!(image.subset_of(&e.set, 1e-7).unwrap());
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let tube = TubeDesign::new(&acl, &b, DMatrix::zeros(1, 2), e.set.clone(), ws);
        prop_assert!(tube.certify(f64::INFINITY).unwrap() <= 1e-7);
    }

    #[test]
    fn riccati_and_lyapunov_residuals(m in prop::collection::vec(-1.5f64..1.5, 4), bv in prop::collection::vec(0.2f64..1.5, 2), r in 0.1f64..20.0) {
        let a = DMatrix::from_row_slice(2, 2, &m);
        let b = DMatrix::from_row_slice(2, 1, &bv);
        let q = DMatrix::identity(2, 2);
        let rm = DMatrix::from_element(1, 1, r);
        let ctrb = nalgebra::stack![b.clone(), &a * &b];
        prop_assume!(ctrb.determinant().abs() > 1e-2);
        let lqr = setcalc::solve_dare(&a, &b, &q, &rm).unwrap();
        prop_assert!(setcalc::dare_residual(&a, &b, &q, &rm, &lqr.p) <= 1e-10 * (1.0 + lqr.p.norm()));
        let acl = &a + &b * &lqr.k;
        let qbar = &q + lqr.k.transpose() * &rm * &lqr.k;
        let p = setcalc::solve_dlyap(&acl, &qbar).unwrap();
        prop_assert!(setcalc::lyap_residual(&acl, &qbar, &p) <= 1e-10 * (1.0 + p.norm()));
    }

    #[test]
    fn reduce_keeps_membership(p in polytope2(), pts in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 10_000)) {
        // Duplicate and loosened rows are what reduce removes.
        let extra = Polytope::new(p.a().clone(), p.b().add_scalar(0.5)).unwrap();
        let noisy = p.intersect(&extra).unwrap().intersect(&p).unwrap();
        let r = noisy.reduce();
        prop_assert!(r.nrows() <= noisy.nrows());
        for (x, y) in pts {
            let x = v(&[x, y]);
            prop_assert_eq!(noisy.contains(&x, 0.0), r.contains(&x, 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn control_invariant_vertices_have_inputs(xmax in 2.0f64..20.0, vmax in 1.0f64..5.0, umax in 0.2f64..2.0) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let x = Polytope::symmetric_box(&[xmax, vmax]).unwrap();
        let u = Polytope::symmetric_box(&[umax]).unwrap();
        let ci = setcalc::max_control_invariant(&a, &b, &x, &u, 500).unwrap();
        prop_assert!(ci.converged);
        for vert in ci.set.vertices().unwrap() {
            let (lo, hi) = admissible_inputs(&ci.set, &a, &b, &vert, -umax, umax);
            prop_assert!(lo <= hi + 1e-7, "vertex {:?} has no input: [{lo}, {hi}]", vert.as_slice());
        }
    }

    #[test]
    fn controllable_sets_grow_with_horizon(xmax in 2.0f64..20.0, vmax in 1.0f64..5.0, umax in 0.2f64..2.0, n in 1usize..6) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let x = Polytope::symmetric_box(&[xmax, vmax]).unwrap();
        let u = Polytope::symmetric_box(&[umax]).unwrap();
        let target = setcalc::max_control_invariant(&a, &b, &x, &u, 500).unwrap().set;
        let k = setcalc::controllable_set_n(&a, &b, None, &x, &u, &target, n).unwrap();
        prop_assert!(!k.emptied);
        for w in k.sets.windows(2) {
            prop_assert!(w[0].subset_of(&w[1], 1e-7).unwrap());
        }
    }
}
