//! SQP for problems with a quadratic objective, nonlinear equality defects
//! and affine inequalities. Steps come from a QP on the linearized defects;
//! globalization is an ℓ1 merit backtracking line search.

use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SqpError {
    #[error("non-finite value returned by {0}")]
    NonFinite(&'static str),
    #[error("warm start violates the affine inequalities by {0:e}")]
    WarmInfeasible(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Nonlinear program with affine inequalities `A x <= b`.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Hessian model of the objective (exact for quadratic costs).
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        finite_difference_jacobian(|y| self.eq_constraints(y), x, 1e-7)
    }
    fn ineq(&self) -> (&DMatrix<f64>, &DVector<f64>);
}

/// Central finite-difference Jacobian.
pub fn finite_difference_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let f0 = f(x);
    let mut j = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let h = step * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        j.column_mut(k).copy_from(&((fp - fm) / (2.0 * h)));
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial ℓ1 penalty; raised above the defect multipliers as needed.
    pub merit_penalty: f64,
    pub qp: QpSettings,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings { max_iter: 50, tol: 1e-8, merit_penalty: 10.0, qp: QpSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: NlpStatus,
    pub iterations: usize,
    pub constraint_violation: f64,
    /// Merit value after every accepted step, for monotonicity checks.
    pub merit_trace: Vec<f64>,
}

pub const FEASIBILITY_TOL: f64 = 1e-6;
const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 30;

fn check(v: &DVector<f64>, what: &'static str) -> Result<(), SqpError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SqpError::NonFinite(what))
    }
}

fn violation(nlp: &dyn Nlp, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
    let (a, b) = nlp.ineq();
    let vi = (a * x - b).iter().fold(0.0f64, |m, v| m.max(*v));
    vi.max(c.amax())
}

/// QP step with the linearized defects relaxed by elastic slacks; used when
/// the exact linearization has no feasible step.
fn elastic_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    bres: &DVector<f64>,
    penalty: f64,
    qp: &QpSettings,
) -> Result<Option<DVector<f64>>, SqpError> {
    let n = g.len();
    let me = c.len();
    let nv = n + 2 * me;
    let mut hh = DMatrix::zeros(nv, nv);
    hh.view_mut((0, 0), (n, n)).copy_from(h);
    let mut f = DVector::from_element(nv, penalty);
    f.rows_mut(0, n).copy_from(g);
    for i in n..nv {
        hh[(i, i)] = 1e-6 * (1.0 + h.amax());
    }
    let mut aeq = DMatrix::zeros(me, nv);
    aeq.view_mut((0, 0), (me, n)).copy_from(jac);
    for i in 0..me {
        aeq[(i, n + i)] = 1.0;
        aeq[(i, n + me + i)] = -1.0;
    }
    let mut ain = DMatrix::zeros(a.nrows() + 2 * me, nv);
    ain.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    for i in 0..2 * me {
        ain[(a.nrows() + i, n + i)] = -1.0;
    }
    let mut bin = DVector::zeros(a.nrows() + 2 * me);
    bin.rows_mut(0, a.nrows()).copy_from(bres);
    let prob = QpProblem::new(hh, f, ain, bin, aeq, -c)?;
    let r = solve_qp(&prob, qp)?;
    Ok(match r.status {
        QpStatus::Infeasible => None,
        _ => Some(r.x.rows(0, n).into_owned()),
    })
}

/// Solve from a warm start that satisfies the affine inequalities. The
/// returned point is never worse than the warm start: if no better feasible
/// iterate is found the warm start itself is returned.
pub fn solve_sqp(nlp: &dyn Nlp, warm: &DVector<f64>, settings: &SqpSettings) -> Result<NlpResult, SqpError> {
    let n = nlp.dim();
    if warm.len() != n {
        return Err(QpError::Dimension("warm start length".into()).into());
    }
    check(warm, "warm start")?;
    let (a, b) = nlp.ineq();
    let warm_viol = (a * warm - b).iter().fold(0.0f64, |m, v| m.max(*v));
    if warm_viol > 1e-8 * (1.0 + b.amax()) {
        return Err(SqpError::WarmInfeasible(warm_viol));
    }

    let mut mu = settings.merit_penalty;
    let mut x = warm.clone();
    let mut c = nlp.eq_constraints(&x);
    check(&c, "equality constraints")?;
    let mut obj = nlp.objective(&x);
    if !obj.is_finite() {
        return Err(SqpError::NonFinite("objective"));
    }
    let mut best: Option<(DVector<f64>, f64, f64)> = None;
    let consider = |x: &DVector<f64>, obj: f64, viol: f64, best: &mut Option<(DVector<f64>, f64, f64)>| {
        if viol <= FEASIBILITY_TOL && best.as_ref().map_or(true, |b| obj < b.1) {
            *best = Some((x.clone(), obj, viol));
        }
    };
    consider(&x, obj, violation(nlp, &x, &c), &mut best);

    let mut merit_trace = vec![];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iter {
        iterations += 1;
        let g = nlp.gradient(&x);
        check(&g, "gradient")?;
        let h = nlp.hessian(&x);
        let jac = nlp.eq_jacobian(&x);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(SqpError::NonFinite("equality Jacobian"));
        }
        let bres = b - a * &x;
        let prob = QpProblem::new(h.clone(), g.clone(), a.clone(), bres.clone(), jac.clone(), -&c)?;
        let r = solve_qp(&prob, &settings.qp)?;
        let p = match r.status {
            QpStatus::Infeasible => match elastic_step(&h, &g, &jac, &c, a, &bres, mu, &settings.qp)? {
                Some(p) => p,
                None => break,
            },
            _ => {
                let lam = r.lambda_eq.amax();
                if lam * 1.1 + 1e-6 > mu {
                    mu = 1.5 * lam + 1e-3;
                }
                r.x
            }
        };
        let c1 = c.iter().map(|v| v.abs()).sum::<f64>();
        let merit = |o: f64, cn: f64| o + mu * cn;
        let phi0 = merit(obj, c1);
        // directional derivative of the ℓ1 merit along p, using the linearization
        let lin = (&jac * &p + &c).iter().map(|v| v.abs()).sum::<f64>();
        let dphi = g.dot(&p) + mu * (lin - c1);
        if p.amax() <= settings.tol * (1.0 + x.amax()) && c.amax() <= settings.tol.max(1e-10) {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let xn = &x + &p * alpha;
            let cn = nlp.eq_constraints(&xn);
            check(&cn, "equality constraints")?;
            let on = nlp.objective(&xn);
            let phin = merit(on, cn.iter().map(|v| v.abs()).sum());
            if phin <= phi0 + ARMIJO_C1 * alpha * dphi.min(0.0) {
                accepted = Some((xn, cn, on, phin));
                break;
            }
            alpha *= BACKTRACK;
        }
        let Some((xn, cn, on, phin)) = accepted else { break };
        let small_step = (&xn - &x).amax() <= settings.tol * (1.0 + x.amax());
        x = xn;
        c = cn;
        obj = on;
        merit_trace.push(phin);
        consider(&x, obj, violation(nlp, &x, &c), &mut best);
        if small_step && c.amax() <= FEASIBILITY_TOL {
            converged = true;
            break;
        }
    }

    let viol = violation(nlp, &x, &c);
    let current_ok = viol <= FEASIBILITY_TOL;
    let (x, obj, viol, status) = match best {
        Some((bx, bo, bv)) if !current_ok || bo < obj => (bx, bo, bv, NlpStatus::FeasibleSuboptimal),
        _ if current_ok => {
            let st = if converged { NlpStatus::Optimal } else { NlpStatus::FeasibleSuboptimal };
            (x, obj, viol, st)
        }
        _ => (x, obj, viol, NlpStatus::Infeasible),
    };
    Ok(NlpResult { x, objective: obj, status, iterations, constraint_violation: viol, merit_trace })
}

/// A quadratic-objective NLP assembled from closures, mostly for tests and
/// small problems.
pub struct ClosureNlp<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub eq: F,
    pub eq_jac: Option<J>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl<F, J> Nlp for ClosureNlp<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn dim(&self) -> usize {
        self.f.len()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.f
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }
    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.eq)(x)
    }
    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.eq_jac {
            Some(j) => j(x),
            None => finite_difference_jacobian(|y| (self.eq)(y), x, 1e-7),
        }
    }
    fn ineq(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a, &self.b)
    }
}
