//! Dense convex QP solver: primal active set with a Phase-1 LP start,
//! range-space KKT solves on a Cholesky factor of `H` and a final
//! full-KKT polish of the optimal working set.

use crate::lp;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// `min ½ x'Hx + f'x  s.t.  A_in x <= b_in,  A_eq x = b_eq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QpWire")]
pub struct QpProblem {
    #[serde(rename = "H", with = "crate::matser::mat")]
    pub h: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    pub f: DVector<f64>,
    #[serde(rename = "A_in", with = "crate::matser::mat")]
    pub a_in: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    pub b_in: DVector<f64>,
    #[serde(rename = "A_eq", with = "crate::matser::mat")]
    pub a_eq: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    pub b_eq: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub warm: Option<DVector<f64>>,
}

/// Deserialization shape; empty constraint blocks lose their column count
/// in JSON and are restored from the length of `f`.
#[derive(Deserialize)]
struct QpWire {
    #[serde(rename = "H", with = "crate::matser::mat")]
    h: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    f: DVector<f64>,
    #[serde(rename = "A_in", with = "crate::matser::mat")]
    a_in: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    b_in: DVector<f64>,
    #[serde(rename = "A_eq", with = "crate::matser::mat")]
    a_eq: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    b_eq: DVector<f64>,
    #[serde(default, with = "opt_vec")]
    warm: Option<DVector<f64>>,
}

impl TryFrom<QpWire> for QpProblem {
    type Error = QpError;

    fn try_from(w: QpWire) -> Result<Self, QpError> {
        let n = w.f.len();
        let fix = |m: DMatrix<f64>| if m.nrows() == 0 { DMatrix::zeros(0, n) } else { m };
        let p = QpProblem {
            h: if n == 0 { DMatrix::zeros(0, 0) } else { w.h },
            f: w.f,
            a_in: fix(w.a_in),
            b_in: w.b_in,
            a_eq: fix(w.a_eq),
            b_eq: w.b_eq,
            warm: w.warm,
        };
        p.validate()?;
        Ok(p)
    }
}

mod opt_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = QpProblem { h, f, a_in, b_in, a_eq, b_eq, warm: None };
        p.validate()?;
        Ok(p)
    }

    /// Problem without equality constraints.
    pub fn inequality(h: DMatrix<f64>, f: DVector<f64>, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, a_in, b_in, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn with_warm(mut self, warm: DVector<f64>) -> Self {
        self.warm = Some(warm);
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        let shape = |ok: bool, what: &str| if ok { Ok(()) } else { Err(QpError::Dimension(what.to_string())) };
        shape(self.h.shape() == (n, n), "H must be n x n")?;
        shape(self.a_in.ncols() == n && self.a_in.nrows() == self.b_in.len(), "A_in/b_in")?;
        shape(self.a_eq.ncols() == n && self.a_eq.nrows() == self.b_eq.len(), "A_eq/b_eq")?;
        if let Some(w) = &self.warm {
            shape(w.len() == n, "warm start length")?;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NonFinite("warm"));
            }
        }
        fn finite<'a>(it: impl IntoIterator<Item = &'a f64>) -> bool {
            it.into_iter().all(|v| v.is_finite())
        }
        if !finite(self.h.iter()) {
            return Err(QpError::NonFinite("H"));
        }
        if !finite(self.f.iter()) {
            return Err(QpError::NonFinite("f"));
        }
        if !finite(self.a_in.iter()) || !finite(self.b_in.iter()) {
            return Err(QpError::NonFinite("inequalities"));
        }
        if !finite(self.a_eq.iter()) || !finite(self.b_eq.iter()) {
            return Err(QpError::NonFinite("equalities"));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest violation of any constraint, in the problem's own scaling.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let vi = (&self.a_in * x - &self.b_in).iter().fold(0.0f64, |m, v| m.max(*v));
        let ve = (&self.a_eq * x - &self.b_eq).amax();
        vi.max(ve)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings { max_iter: 500, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Stationarity residual relative to `1 + |f| + |H||x|` (infinity norms).
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub lambda_in: DVector<f64>,
    pub lambda_eq: DVector<f64>,
}

/// Constraint rows after normalization: equalities first, then inequalities.
struct Rows {
    c: DMatrix<f64>,
    d: DVector<f64>,
    scale: Vec<f64>,
    /// Original index of each kept row (equality or inequality numbering).
    origin: Vec<usize>,
    meq: usize,
}

fn normalize_rows(a: &DMatrix<f64>, b: &DVector<f64>, eq: bool) -> Result<(Vec<DVector<f64>>, Vec<f64>, Vec<f64>, Vec<usize>), ()> {
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut scale = Vec::new();
    let mut origin = Vec::new();
    for i in 0..a.nrows() {
        let r = a.row(i).transpose();
        let nr = r.norm();
        if nr <= 1e-14 {
            let bad = if eq { b[i].abs() > 1e-9 } else { b[i] < -1e-9 };
            if bad {
                return Err(());
            }
            continue;
        }
        rows.push(r / nr);
        rhs.push(b[i] / nr);
        scale.push(nr);
        origin.push(i);
    }
    Ok((rows, rhs, scale, origin))
}

fn build_rows(p: &QpProblem) -> Option<Rows> {
    let n = p.dim();
    let (er, eb, es, eo) = normalize_rows(&p.a_eq, &p.b_eq, true).ok()?;
    let (ir, ib, is, io) = normalize_rows(&p.a_in, &p.b_in, false).ok()?;
    let meq = er.len();
    let m = meq + ir.len();
    let mut c = DMatrix::zeros(m, n);
    for (k, r) in er.iter().chain(ir.iter()).enumerate() {
        c.row_mut(k).copy_from(&r.transpose());
    }
    let d = DVector::from_iterator(m, eb.into_iter().chain(ib));
    let scale = es.into_iter().chain(is).collect();
    let origin = eo.into_iter().chain(io).collect();
    Some(Rows { c, d, scale, origin, meq })
}

/// Cholesky of `H`, regularized with the smallest `10^k · 1e-9 · I` that works.
fn factor_h(h: &DMatrix<f64>) -> (Cholesky<f64, Dyn>, DMatrix<f64>) {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return (c, sym);
    }
    let n = h.nrows();
    let mut eps = 1e-9 * (1.0 + sym.amax());
    loop {
        let reg = &sym + DMatrix::identity(n, n) * eps;
        if let Some(c) = reg.clone().cholesky() {
            return (c, reg);
        }
        eps *= 10.0;
    }
}

/// Phase 1: a point satisfying all constraints, preferring interior ones.
/// Returns the point and its max violation (positive when infeasible).
fn phase_one(rows: &Rows, n: usize) -> (DVector<f64>, f64) {
    let meq = rows.meq;
    let ceq = rows.c.rows(0, meq).into_owned();
    let deq = rows.d.rows(0, meq).into_owned();
    let cin = rows.c.rows(meq, rows.c.nrows() - meq).into_owned();
    let din = rows.d.rows(meq, rows.d.len() - meq).into_owned();

    let (xp, null) = if meq == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let gram = ceq.transpose() * &ceq;
        let eig = gram.symmetric_eigen();
        let top = eig.eigenvalues.amax().max(1.0);
        let null_cols: Vec<DVector<f64>> = (0..n)
            .filter(|&j| eig.eigenvalues[j] <= 1e-10 * top)
            .map(|j| eig.eigenvectors.column(j).into_owned())
            .collect();
        let svd = ceq.clone().svd(true, true);
        let xp = svd.solve(&deq, 1e-10).unwrap_or_else(|_| DVector::zeros(n));
        let null = if null_cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&null_cols) };
        (xp, null)
    };
    let eq_res = if meq == 0 { 0.0 } else { (&ceq * &xp - &deq).amax() };
    if null.ncols() == 0 {
        let v = (&cin * &xp - &din).iter().fold(eq_res, |m, v| m.max(*v));
        return (xp, v);
    }
    let ar = &cin * &null;
    let br = &din - &cin * &xp;
    match lp::max_slack_point(&ar, &br) {
        Some((y, t)) => {
            let x = &xp + &null * y;
            (x, eq_res.max(-t).max(0.0))
        }
        None => (xp.clone(), f64::INFINITY),
    }
}

/// Working set with `Y = L^-1 C_W'` and the Cholesky factor `R` of `Y'Y`.
struct Working<'a> {
    chol: &'a Cholesky<f64, Dyn>,
    ids: Vec<usize>,
    y: Vec<DVector<f64>>,
    r: Vec<Vec<f64>>,
}

impl<'a> Working<'a> {
    fn new(chol: &'a Cholesky<f64, Dyn>) -> Self {
        Working { chol, ids: Vec::new(), y: Vec::new(), r: Vec::new() }
    }

    fn linv(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().solve_lower_triangular(v).expect("nonsingular factor")
    }

    fn push_y(&mut self, id: usize, yn: DVector<f64>) -> bool {
        let k = self.y.len();
        let mut row = vec![0.0; k + 1];
        for i in 0..k {
            let mut s = self.y[i].dot(&yn);
            for j in 0..i {
                s -= self.r[i][j] * row[j];
            }
            row[i] = s / self.r[i][i];
        }
        let yy = yn.dot(&yn);
        let d2 = yy - row[..k].iter().map(|v| v * v).sum::<f64>();
        if d2 <= 1e-11 * yy {
            return false;
        }
        row[k] = d2.sqrt();
        self.r.push(row);
        self.y.push(yn);
        self.ids.push(id);
        true
    }

    fn try_add(&mut self, id: usize, c: &DMatrix<f64>) -> bool {
        let yn = self.linv(&c.row(id).transpose());
        self.push_y(id, yn)
    }

    fn remove(&mut self, pos: usize) {
        let ids: Vec<usize> = self.ids.drain(..).collect();
        let ys: Vec<DVector<f64>> = self.y.drain(..).collect();
        self.r.clear();
        for (k, (id, y)) in ids.into_iter().zip(ys).enumerate() {
            if k != pos {
                let ok = self.push_y(id, y);
                debug_assert!(ok);
            }
        }
    }

    fn solve_m(&self, rhs: &[f64]) -> Vec<f64> {
        let k = rhs.len();
        let mut z = vec![0.0; k];
        for i in 0..k {
            let mut s = rhs[i];
            for j in 0..i {
                s -= self.r[i][j] * z[j];
            }
            z[i] = s / self.r[i][i];
        }
        for i in (0..k).rev() {
            let mut s = z[i];
            for j in i + 1..k {
                s -= self.r[j][i] * z[j];
            }
            z[i] = s / self.r[i][i];
        }
        z
    }

    /// Step `p` and multipliers of `min ½p'Hp + g'p s.t. C_W p = 0`.
    fn eqp(&self, g: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let gl = self.linv(g);
        let rhs: Vec<f64> = self.y.iter().map(|y| -y.dot(&gl)).collect();
        let lam = self.solve_m(&rhs);
        let mut t = gl;
        for (y, l) in self.y.iter().zip(&lam) {
            t.axpy(*l, y, 1.0);
        }
        let p = -self.chol.l_dirty().transpose().solve_upper_triangular(&t).expect("nonsingular factor");
        (p, lam)
    }
}

/// Solve a convex QP. Deterministic for identical inputs and settings.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpResult, QpError> {
    problem.validate()?;
    let n = problem.dim();
    let empty_result = |x: DVector<f64>, status, viol| QpResult {
        objective: problem.objective(&x),
        x,
        status,
        iterations: 0,
        kkt_residual: f64::INFINITY,
        max_violation: viol,
        lambda_in: DVector::zeros(problem.b_in.len()),
        lambda_eq: DVector::zeros(problem.b_eq.len()),
    };
    let rows = match build_rows(problem) {
        Some(r) => r,
        None => return Ok(empty_result(DVector::zeros(n), QpStatus::Infeasible, f64::INFINITY)),
    };
    let m = rows.c.nrows();
    let meq = rows.meq;
    let feas_tol = 0.1 * settings.tol;

    let viol_scaled = |x: &DVector<f64>| -> f64 {
        let s = &rows.c * x - &rows.d;
        (0..m).map(|i| if i < meq { s[i].abs() } else { s[i] }).fold(0.0, f64::max)
    };

    let mut x = match &problem.warm {
        Some(w) if viol_scaled(w) <= feas_tol => w.clone(),
        _ => {
            let (x0, v) = phase_one(&rows, n);
            if v > settings.tol {
                return Ok(empty_result(x0, QpStatus::Infeasible, v));
            }
            x0
        }
    };

    let (chol, hreg) = factor_h(&problem.h);
    let mut ws = Working::new(&chol);
    for i in 0..meq {
        ws.try_add(i, &rows.c);
    }
    let slack0 = &rows.d - &rows.c * &x;
    for i in meq..m {
        if slack0[i].abs() <= feas_tol {
            ws.try_add(i, &rows.c);
        }
    }

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut lam = vec![];
    while iterations < settings.max_iter {
        iterations += 1;
        let g = &hreg * &x + &problem.f;
        let (p, l) = ws.eqp(&g);
        lam = l;
        let gscale = 1.0 + g.amax();
        // A full working set pins a vertex, and a step whose predicted
        // decrease is below roundoff is noise from the factorization.
        let decrease = 0.5 * p.dot(&(&hreg * &p));
        let negligible = decrease <= 1e-14 * (1.0 + problem.objective(&x).abs());
        if ws.ids.len() >= n || negligible || p.amax() <= 1e-11 * (1.0 + x.amax()) {
            let worst = ws
                .ids
                .iter()
                .zip(&lam)
                .enumerate()
                .filter(|(_, (id, _))| **id >= meq)
                .min_by(|a, b| (a.1).1.partial_cmp((b.1).1).unwrap());
            match worst {
                Some((pos, (_, l))) if *l < -settings.tol * gscale => {
                    ws.remove(pos);
                    continue;
                }
                _ => {
                    status = QpStatus::Optimal;
                    break;
                }
            }
        }
        let cp = &rows.c * &p;
        let mut alpha = 1.0;
        let mut block = None;
        for i in meq..m {
            if cp[i] > 1e-14 && !ws.ids.contains(&i) {
                let slack = (rows.d[i] - rows.c.row(i).dot(&x.transpose())).max(0.0);
                let a = slack / cp[i];
                if a < alpha {
                    alpha = a;
                    block = Some(i);
                }
            }
        }
        x.axpy(alpha, &p, 1.0);
        if let Some(i) = block {
            if !ws.try_add(i, &rows.c) {
                // Blocking row is dependent on the working set: the step stays
                // feasible for it only to first order, so stop moving along p.
                status = QpStatus::Optimal;
                break;
            }
        }
    }

    // Multipliers in scaled row numbering.
    let mut lam_rows = vec![0.0; m];
    for (id, l) in ws.ids.iter().zip(&lam) {
        lam_rows[*id] = *l;
    }
    if status == QpStatus::Optimal {
        if let Some((xp, lp)) = polish(&hreg, &problem.f, &rows, &ws.ids) {
            let ok_mult = ws.ids.iter().zip(&lp).all(|(id, l)| *id < meq || *l >= -settings.tol * (1.0 + lp.iter().fold(0.0f64, |a, b| a.max(b.abs()))));
            if ok_mult && viol_scaled(&xp) <= feas_tol.max(viol_scaled(&x)) {
                x = xp;
                for (id, l) in ws.ids.iter().zip(&lp) {
                    lam_rows[*id] = *l;
                }
            }
        }
    }

    let mut lambda_in = DVector::zeros(problem.b_in.len());
    let mut lambda_eq = DVector::zeros(problem.b_eq.len());
    for k in 0..m {
        let l = lam_rows[k] / rows.scale[k];
        if k < meq {
            lambda_eq[rows.origin[k]] = l;
        } else {
            lambda_in[rows.origin[k]] = l.max(0.0);
        }
    }
    let stat = &problem.h * &x + &problem.f + problem.a_in.transpose() * &lambda_in + problem.a_eq.transpose() * &lambda_eq;
    let denom = 1.0 + problem.f.amax() + problem.h.amax() * x.amax();
    let kkt_residual = stat.amax() / denom;
    Ok(QpResult {
        objective: problem.objective(&x),
        max_violation: problem.violation(&x).max(0.0),
        x,
        status,
        iterations,
        kkt_residual,
        lambda_in,
        lambda_eq,
    })
}

/// Solve the equality-constrained KKT system of the final working set
/// directly, removing the drift accumulated by the incremental steps.
fn polish(h: &DMatrix<f64>, f: &DVector<f64>, rows: &Rows, ids: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = f.len();
    let k = ids.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-f));
    for (j, &id) in ids.iter().enumerate() {
        let r = rows.c.row(id);
        kkt.view_mut((n + j, 0), (1, n)).copy_from(&r);
        kkt.view_mut((0, n + j), (n, 1)).copy_from(&r.transpose());
        rhs[n + j] = rows.d[id];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).iter().copied().collect()))
}
