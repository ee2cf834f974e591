use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tubempc::qp::{solve_qp, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Clone)]
struct BoxQp {
    h: DMatrix<f64>,
    f: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxQp {
    fn problem(&self) -> QpProblem {
        let n = self.f.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = self.hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -self.lo[i];
        }
        QpProblem::inequality(self.h.clone(), self.f.clone(), a, b).unwrap()
    }

    /// Enumerate every lower/upper/free assignment and keep the best
    /// feasible stationary point of the reduced problem.
    fn oracle(&self) -> f64 {
        let n = self.f.len();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut x = DVector::zeros(n);
            let mut free = Vec::new();
            for i in 0..n {
                match c % 3 {
                    0 => free.push(i),
                    1 => x[i] = self.lo[i],
                    _ => x[i] = self.hi[i],
                }
                c /= 3;
            }
            if !free.is_empty() {
                let k = free.len();
                let hff = DMatrix::from_fn(k, k, |r, s| self.h[(free[r], free[s])]);
                let g = &self.h * &x + &self.f;
                let rhs = DVector::from_fn(k, |r, _| -g[free[r]]);
                let sol = hff.cholesky().unwrap().solve(&rhs);
                for (r, &i) in free.iter().enumerate() {
                    x[i] = sol[r];
                }
            }
            if (0..n).all(|i| x[i] >= self.lo[i] - 1e-12 && x[i] <= self.hi[i] + 1e-12) {
                best = best.min(0.5 * x.dot(&(&self.h * &x)) + self.f.dot(&x));
            }
        }
        best
    }
}

fn box_qp() -> impl Strategy<Value = BoxQp> {
    (
        prop::collection::vec(-1.0f64..1.0, 25),
        prop::collection::vec(-3.0f64..3.0, 5),
        prop::collection::vec(0.1f64..2.0, 5),
        prop::collection::vec(0.1f64..2.0, 5),
    )
        .prop_map(|(m, f, lo, hi)| {
            let m = DMatrix::from_row_slice(5, 5, &m);
            BoxQp {
                h: &m * m.transpose() + DMatrix::identity(5, 5) * 0.5,
                f: DVector::from_vec(f),
                lo: lo.iter().map(|v| -v).collect(),
                hi,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_active_set_enumeration(q in box_qp()) {
        let r = solve_qp(&q.problem(), &QpSettings::default()).unwrap();
        prop_assert_eq!(r.status, QpStatus::Optimal);
        let best = q.oracle();
        prop_assert!((r.objective - best).abs() <= 1e-6 * (1.0 + best.abs()), "{} vs {}", r.objective, best);
        prop_assert!(r.max_violation <= 1e-8);
        prop_assert!(r.kkt_residual <= 1e-7);
    }

    #[test]
    fn objective_scaling_keeps_argmin(q in box_qp(), lambda in 0.01f64..100.0) {
        let p = q.problem();
        let mut s = p.clone();
        s.h *= lambda;
        s.f *= lambda;
        let a = solve_qp(&p, &QpSettings::default()).unwrap();
        let b = solve_qp(&s, &QpSettings::default()).unwrap();
        prop_assert!((&a.x - &b.x).amax() <= 1e-7);
    }

    #[test]
    fn warm_start_only_changes_iterations(q in box_qp(), w in prop::collection::vec(-1.0f64..1.0, 5)) {
        let p = q.problem();
        let warm: Vec<f64> = (0..5).map(|i| q.lo[i] + (w[i] + 1.0) * 0.5 * (q.hi[i] - q.lo[i])).collect();
        let cold = solve_qp(&p, &QpSettings::default()).unwrap();
        let hot = solve_qp(&p.clone().with_warm(DVector::from_vec(warm)), &QpSettings::default()).unwrap();
        prop_assert!((cold.objective - hot.objective).abs() <= 1e-6 * (1.0 + cold.objective.abs()));
    }

    #[test]
    fn equality_constrained_kkt(q in box_qp(), row in prop::collection::vec(0.2f64..1.0, 5)) {
        let mut p = q.problem();
        p.a_eq = DMatrix::from_row_slice(1, 5, &row);
        p.b_eq = DVector::from_vec(vec![0.0]);
        let r = solve_qp(&p, &QpSettings::default()).unwrap();
        prop_assert_eq!(r.status, QpStatus::Optimal);
        prop_assert!(r.max_violation <= 1e-8);
        prop_assert!(r.kkt_residual <= 1e-7);
        prop_assert!(r.lambda_in.iter().all(|l| *l >= 0.0));
    }
}

#[test]
fn infeasible_with_equalities() {
    let p = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::zeros(2),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_vec(vec![0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_vec(vec![5.0]),
    )
    .unwrap();
    let r = solve_qp(&p, &QpSettings::default()).unwrap();
    assert_eq!(r.status, QpStatus::Optimal);
    assert!((r.x[0] - 0.0).abs() < 1e-10 && (r.x[1] - 5.0).abs() < 1e-10);

    let mut bad = p.clone();
    bad.a_eq = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    bad.b_eq = DVector::from_vec(vec![5.0, 4.0]);
    assert_eq!(solve_qp(&bad, &QpSettings::default()).unwrap().status, QpStatus::Infeasible);
}
