//! One finite-horizon nominal problem in multiple-shooting form. Every
//! controller in the stack (baseline tube MPC, Parent, Child, deterministic
//! Child) is an instance of [`LayerProblem`] with different constraint data.
//!
//! Decision vector: `[z_0, ..., z_N, mu_0, ..., mu_{Nu-1}]` with
//! `Nu = N / hold`. The input applied at stage `i` is
//! `v_i = offset_i + mu_{i / hold}`.

use super::system::Nonlinearity;
use super::MpcError;
use crate::lp;
use crate::polytope::Polytope;
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use crate::sqp::{solve_sqp, Nlp, NlpStatus, SqpSettings};
use nalgebra::{DMatrix, DVector};

/// `z_stage - center ∈ set`.
#[derive(Debug, Clone)]
pub struct StageConstraint {
    pub stage: usize,
    pub set: Polytope,
    pub center: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// `z_0 = x`.
    Fixed(DVector<f64>),
    /// `x - z_0 ∈ set`.
    Tube { x: DVector<f64>, set: Polytope },
}

#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: Nonlinearity,
    pub horizon: usize,
    pub hold: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub target: DVector<f64>,
    pub init: InitialCondition,
    pub state_constraints: Vec<StageConstraint>,
    /// `mu_k + input_shift[k] ∈ input_set`.
    pub input_set: Polytope,
    pub input_shift: Vec<DVector<f64>>,
    pub input_offset: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Suboptimal,
}

#[derive(Debug, Clone)]
pub struct LayerSolution {
    pub y: DVector<f64>,
    pub z: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    /// Applied nominal inputs per stage, `offset_i + mu_{i/hold}`.
    pub v: Vec<DVector<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Linear layer problem with the states eliminated.
pub struct Condensed {
    pub t: DMatrix<f64>,
    pub c: DVector<f64>,
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    moff: usize,
}

impl Condensed {
    pub fn expand(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.t * p + &self.c
    }

    /// Reduced coordinates of a full decision vector.
    pub fn reduce(&self, prob: &LayerProblem, y: &DVector<f64>) -> DVector<f64> {
        let nmu = self.t.ncols() - self.moff;
        let mut p = DVector::zeros(self.t.ncols());
        p.rows_mut(0, self.moff).copy_from(&y.rows(0, self.moff));
        p.rows_mut(self.moff, nmu).copy_from(&y.rows(prob.mi(0), nmu));
        p
    }

    /// Worst constraint violation with rows scaled to unit norm.
    pub fn scaled_violation(&self, p: &DVector<f64>) -> f64 {
        let s = &self.a_in * p - &self.b_in;
        (0..s.len())
            .map(|i| {
                let nr = self.a_in.row(i).norm();
                if nr > 0.0 { s[i] / nr } else { s[i] }
            })
            .fold(0.0, f64::max)
    }

    /// Maximum-slack point on the unit-normalized rows, if the slack is
    /// nonnegative up to roundoff.
    pub fn feasible_point(&self) -> Option<DVector<f64>> {
        let mut a = self.a_in.clone();
        let mut b = self.b_in.clone();
        for i in 0..a.nrows() {
            let nr = a.row(i).norm();
            if nr > 0.0 {
                a.row_mut(i).scale_mut(1.0 / nr);
                b[i] /= nr;
            }
        }
        let (p, slack) = lp::max_slack_point(&a, &b)?;
        if slack < -1e-9 * (1.0 + b.amax()) {
            return None;
        }
        Some(p)
    }
}

/// Cost, constraints and layout assembled once per solve.
pub struct Assembled<'a> {
    pub prob: &'a LayerProblem,
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub constant: f64,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl LayerProblem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.horizon / self.hold
    }

    pub fn dim(&self) -> usize {
        self.n() * (self.horizon + 1) + self.m() * self.n_inputs()
    }

    fn zi(&self, j: usize) -> usize {
        j * self.n()
    }

    fn mi(&self, k: usize) -> usize {
        self.n() * (self.horizon + 1) + k * self.m()
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |s: &str| Err(MpcError::Config(s.to_string()));
        if self.hold == 0 || self.horizon == 0 || self.horizon % self.hold != 0 {
            return bad("horizon must be a positive multiple of input_hold");
        }
        if self.input_offset.len() != self.horizon || self.input_shift.len() != self.n_inputs() {
            return bad("input offsets/shifts do not match the horizon");
        }
        if self.state_constraints.iter().any(|c| c.stage > self.horizon || c.set.dim() != self.n()) {
            return bad("stage constraint outside the horizon or of wrong dimension");
        }
        Ok(())
    }

    pub fn pack(&self, z: &[DVector<f64>], mu: &[DVector<f64>]) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        for (j, zj) in z.iter().enumerate().take(self.horizon + 1) {
            y.rows_mut(self.zi(j), self.n()).copy_from(zj);
        }
        for (k, mk) in mu.iter().enumerate().take(self.n_inputs()) {
            y.rows_mut(self.mi(k), self.m()).copy_from(mk);
        }
        y
    }

    pub fn unpack(&self, y: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let z: Vec<_> = (0..=self.horizon).map(|j| y.rows(self.zi(j), self.n()).into_owned()).collect();
        let mu: Vec<_> = (0..self.n_inputs()).map(|k| y.rows(self.mi(k), self.m()).into_owned()).collect();
        let v = (0..self.horizon).map(|i| &self.input_offset[i] + &mu[i / self.hold]).collect();
        (z, mu, v)
    }

    pub fn assemble(&self) -> Assembled<'_> {
        let (n, m, nn) = (self.n(), self.m(), self.dim());
        let mut h = DMatrix::zeros(nn, nn);
        let mut f = DVector::zeros(nn);
        let mut constant = 0.0;
        for j in 0..=self.horizon {
            let w = if j < self.horizon { &self.q } else { &self.p };
            h.view_mut((self.zi(j), self.zi(j)), (n, n)).add_assign(&(w * 2.0));
            f.rows_mut(self.zi(j), n).add_assign(&(w * &self.target * -2.0));
            constant += self.target.dot(&(w * &self.target));
        }
        for i in 0..self.horizon {
            let k = self.mi(i / self.hold);
            let off = &self.input_offset[i];
            h.view_mut((k, k), (m, m)).add_assign(&(&self.r * 2.0));
            f.rows_mut(k, m).add_assign(&(&self.r * off * 2.0));
            constant += off.dot(&(&self.r * off));
        }

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        if let InitialCondition::Tube { x, set } = &self.init {
            for i in 0..set.nrows() {
                let a = set.a().row(i).transpose();
                let mut r = DVector::zeros(nn);
                r.rows_mut(0, n).copy_from(&(-&a));
                rows.push((r, set.b()[i] - a.dot(x)));
            }
        }
        for c in &self.state_constraints {
            for i in 0..c.set.nrows() {
                let a = c.set.a().row(i).transpose();
                let mut r = DVector::zeros(nn);
                r.rows_mut(self.zi(c.stage), n).copy_from(&a);
                rows.push((r, c.set.b()[i] + a.dot(&c.center)));
            }
        }
        for k in 0..self.n_inputs() {
            for i in 0..self.input_set.nrows() {
                let a = self.input_set.a().row(i).transpose();
                let mut r = DVector::zeros(nn);
                r.rows_mut(self.mi(k), m).copy_from(&a);
                rows.push((r, self.input_set.b()[i] - a.dot(&self.input_shift[k])));
            }
        }
        let mut a_in = DMatrix::zeros(rows.len(), nn);
        let mut b_in = DVector::zeros(rows.len());
        for (i, (r, b)) in rows.into_iter().enumerate() {
            a_in.row_mut(i).copy_from(&r.transpose());
            b_in[i] = b;
        }
        Assembled { prob: self, h, f, constant, a_in, b_in }
    }

    fn n_eq(&self) -> usize {
        self.n() * self.horizon + if matches!(self.init, InitialCondition::Fixed(_)) { self.n() } else { 0 }
    }

    /// Dynamics defects `z_{i+1} - (A z_i + B v_i + g(z_i))`, then `z_0 - x`
    /// for a fixed initial state.
    pub fn defects(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut d = DVector::zeros(self.n_eq());
        for i in 0..self.horizon {
            let zi = y.rows(self.zi(i), n).into_owned();
            let zn = y.rows(self.zi(i + 1), n);
            let v = &self.input_offset[i] + y.rows(self.mi(i / self.hold), self.m());
            let pred = &self.a * &zi + &self.b * v + self.g.eval(&zi);
            d.rows_mut(i * n, n).copy_from(&(zn - pred));
        }
        if let InitialCondition::Fixed(x) = &self.init {
            d.rows_mut(self.horizon * n, n).copy_from(&(y.rows(0, n) - x));
        }
        d
    }

    pub fn defect_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut j = DMatrix::zeros(self.n_eq(), self.dim());
        for i in 0..self.horizon {
            let zi = y.rows(self.zi(i), n).into_owned();
            let da = &self.a + self.g.jacobian(&zi);
            j.view_mut((i * n, self.zi(i)), (n, n)).copy_from(&(-da));
            j.view_mut((i * n, self.zi(i + 1)), (n, n)).fill_with_identity();
            j.view_mut((i * n, self.mi(i / self.hold)), (n, m)).copy_from(&(-&self.b));
        }
        if matches!(self.init, InitialCondition::Fixed(_)) {
            j.view_mut((self.horizon * n, 0), (n, n)).fill_with_identity();
        }
        j
    }

    /// Largest violation of any constraint (defects in absolute value).
    pub fn violation(&self, asm: &Assembled, y: &DVector<f64>) -> f64 {
        let vi = (&asm.a_in * y - &asm.b_in).iter().fold(0.0f64, |a, v| a.max(*v));
        vi.max(self.defects(y).amax())
    }

    pub fn cost(&self, asm: &Assembled, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&asm.h * y)) + asm.f.dot(y) + asm.constant
    }

    /// Simulate the nominal model from `z0` with `mu`, giving a point that
    /// satisfies every defect exactly.
    pub fn rollout(&self, z0: &DVector<f64>, mu: &[DVector<f64>]) -> DVector<f64> {
        let mut z = vec![z0.clone()];
        for i in 0..self.horizon {
            let v = &self.input_offset[i] + &mu[i / self.hold];
            let zi = &z[i];
            z.push(&self.a * zi + &self.b * v + self.g.eval(zi));
        }
        self.pack(&z, mu)
    }

    /// Interior-most feasible point of a linear problem, from an LP over the
    /// condensed variables `(z_0, mu)`. `None` when infeasible.
    pub fn feasible_start(&self, asm: &Assembled) -> Option<DVector<f64>> {
        let cd = self.condense(asm);
        let p = cd.feasible_point()?;
        Some(cd.expand(&p))
    }

    /// Eliminate the states of a linear problem: `y = T p + c` with
    /// `p = [z_0 (if free), mu]`.
    pub fn condense(&self, asm: &Assembled) -> Condensed {
        debug_assert!(self.g.is_zero());
        let (n, m) = (self.n(), self.m());
        let nu = self.n_inputs();
        let free_z0 = !matches!(self.init, InitialCondition::Fixed(_));
        let moff = if free_z0 { n } else { 0 };
        let np = moff + m * nu;
        let mut t = DMatrix::zeros(self.dim(), np);
        let mut c = DVector::zeros(self.dim());
        for k in 0..nu {
            t.view_mut((self.mi(k), moff + k * m), (m, m)).fill_with_identity();
        }
        match &self.init {
            InitialCondition::Fixed(x) => c.rows_mut(0, n).copy_from(x),
            InitialCondition::Tube { .. } => t.view_mut((0, 0), (n, n)).fill_with_identity(),
        }
        for i in 0..self.horizon {
            let k = i / self.hold;
            let prev_t = t.rows(self.zi(i), n).into_owned();
            let mut next_t = &self.a * prev_t;
            next_t.columns_mut(moff + k * m, m).add_assign(&self.b);
            t.rows_mut(self.zi(i + 1), n).copy_from(&next_t);
            let prev_c = c.rows(self.zi(i), n).into_owned();
            let next_c = &self.a * prev_c + &self.b * &self.input_offset[i];
            c.rows_mut(self.zi(i + 1), n).copy_from(&next_c);
        }
        let ht = &asm.h * &t;
        let h = t.transpose() * &ht;
        let h = (&h + h.transpose()) * 0.5;
        let f = t.transpose() * (&asm.h * &c + &asm.f);
        let a_in = &asm.a_in * &t;
        let b_in = &asm.b_in - &asm.a_in * &c;
        Condensed { t, c, h, f, a_in, b_in, moff }
    }

    /// Closest point to `y0` (Euclidean) satisfying the affine constraints.
    fn affine_projection(&self, asm: &Assembled, y0: &DVector<f64>, qp: &QpSettings) -> Result<Option<DVector<f64>>, MpcError> {
        let nn = self.dim();
        let (a_eq, b_eq) = match &self.init {
            InitialCondition::Fixed(x) => {
                let mut a = DMatrix::zeros(self.n(), nn);
                a.view_mut((0, 0), (self.n(), self.n())).fill_with_identity();
                (a, x.clone())
            }
            _ => (DMatrix::zeros(0, nn), DVector::zeros(0)),
        };
        let prob = QpProblem::new(DMatrix::identity(nn, nn), -y0, asm.a_in.clone(), asm.b_in.clone(), a_eq, b_eq)?;
        let r = solve_qp(&prob, qp)?;
        Ok(match r.status {
            QpStatus::Infeasible => None,
            _ => Some(r.x),
        })
    }

    fn solution(&self, asm: &Assembled, y: DVector<f64>, status: SolveStatus, iterations: usize) -> LayerSolution {
        let cost = self.cost(asm, &y);
        let (z, mu, v) = self.unpack(&y);
        LayerSolution { y, z, mu, v, cost, status, iterations }
    }

    /// Solve the layer problem. A warm start that satisfies the affine
    /// constraints is used as is; otherwise a feasible start is constructed.
    pub fn solve(&self, warm: Option<&DVector<f64>>, qp: &QpSettings, sqp: &SqpSettings, name: &'static str) -> Result<LayerSolution, MpcError> {
        self.validate()?;
        let asm = self.assemble();
        let infeasible = || MpcError::Infeasible { layer: name };
        let scale = 1.0 + asm.b_in.amax();
        let affine_ok = |y: &DVector<f64>| (&asm.a_in * y - &asm.b_in).iter().all(|v| *v <= 1e-9 * scale);
        if self.g.is_zero() {
            let cd = self.condense(&asm);
            let start = match warm.map(|w| cd.reduce(self, w)) {
                Some(p) if cd.scaled_violation(&p) <= 0.05 * qp.tol => p,
                _ => cd.feasible_point().ok_or_else(infeasible)?,
            };
            let prob = QpProblem::inequality(cd.h.clone(), cd.f.clone(), cd.a_in.clone(), cd.b_in.clone())?.with_warm(start);
            let r = solve_qp(&prob, qp)?;
            let y = cd.expand(&r.x);
            return match r.status {
                QpStatus::Infeasible => Err(infeasible()),
                QpStatus::Optimal => Ok(self.solution(&asm, y, SolveStatus::Optimal, r.iterations)),
                QpStatus::MaxIter => Ok(self.solution(&asm, y, SolveStatus::Suboptimal, r.iterations)),
            };
        }
        let start = match warm {
            Some(w) if affine_ok(w) => w.clone(),
            _ => {
                let guess = match warm {
                    Some(w) => w.clone(),
                    None => {
                        let z0 = match &self.init {
                            InitialCondition::Fixed(x) | InitialCondition::Tube { x, .. } => x.clone(),
                        };
                        self.rollout(&z0, &vec![DVector::zeros(self.m()); self.n_inputs()])
                    }
                };
                self.affine_projection(&asm, &guess, qp)?.ok_or_else(infeasible)?
            }
        };
        let r = solve_sqp(&asm, &start, sqp)?;
        match r.status {
            NlpStatus::Infeasible => Err(infeasible()),
            NlpStatus::Optimal => Ok(self.solution(&asm, r.x, SolveStatus::Optimal, r.iterations)),
            NlpStatus::FeasibleSuboptimal => Ok(self.solution(&asm, r.x, SolveStatus::Suboptimal, r.iterations)),
        }
    }

    /// The condensed QP of a linear layer, `None` when `g` is nonzero.
    pub fn condensed_qp(&self) -> Result<Option<QpProblem>, MpcError> {
        if !self.g.is_zero() {
            return Ok(None);
        }
        self.validate()?;
        let cd = self.condense(&self.assemble());
        Ok(Some(QpProblem::inequality(cd.h, cd.f, cd.a_in, cd.b_in)?))
    }

    /// Exact linear equality data (valid when `g` is zero).
    pub fn linear_equalities(&self) -> (DMatrix<f64>, DVector<f64>) {
        let y0 = DVector::zeros(self.dim());
        let j = self.defect_jacobian(&y0);
        let d0 = self.defects(&y0);
        (j, -d0)
    }
}

impl Nlp for Assembled<'_> {
    fn dim(&self) -> usize {
        self.prob.dim()
    }
    fn objective(&self, y: &DVector<f64>) -> f64 {
        self.prob.cost(self, y)
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.h * y + &self.f
    }
    fn hessian(&self, _y: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }
    fn eq_constraints(&self, y: &DVector<f64>) -> DVector<f64> {
        self.prob.defects(y)
    }
    fn eq_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        self.prob.defect_jacobian(y)
    }
    fn ineq(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a_in, &self.b_in)
    }
}

use std::ops::AddAssign;
