//! Offline design computations: Lyapunov and Riccati solutions, robust
//! invariant tube cross-sections, invariant terminal sets and N-step
//! controllable sets.

use crate::lp;
use crate::polytope::{Polytope, PolytopeError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("closed loop is not Schur stable (spectral radius {0:.6})")]
    Unstable(f64),
    #[error("Riccati iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("inconsistent shapes: {0}")]
    Shape(String),
    #[error("disturbance set does not contain the origin")]
    OriginNotInW,
    #[error("alpha <= {alpha_max} not reached within {cap} terms")]
    AlphaUnreachable { alpha_max: f64, cap: usize },
    #[error("invariance certificate failed by {0:e}")]
    NotInvariant(f64),
    #[error("{0} must be at least {1}")]
    TooSmall(&'static str, usize),
}

pub type Result<T> = std::result::Result<T, SetError>;

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn require_square(m: &DMatrix<f64>, name: &str) -> Result<usize> {
    if !m.is_square() {
        return Err(SetError::Shape(format!("{name} is {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

/// Residual `||Acl' P Acl + Qbar - P||_F`.
pub fn lyap_residual(acl: &DMatrix<f64>, qbar: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (acl.transpose() * p * acl + qbar - p).norm()
}

/// Solve `Acl' P Acl + Qbar = P` for a Schur-stable `Acl`.
pub fn solve_dlyap(acl: &DMatrix<f64>, qbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(acl, "Acl")?;
    if qbar.shape() != (n, n) {
        return Err(SetError::Shape("Qbar must match Acl".into()));
    }
    let rho = spectral_radius(acl);
    if rho >= 1.0 {
        return Err(SetError::Unstable(rho));
    }
    let at = acl.transpose();
    let mut p = if n <= 12 {
        let nn = n * n;
        let kron = at.kronecker(&at);
        let lhs = DMatrix::<f64>::identity(nn, nn) - kron;
        let rhs = DVector::from_column_slice(qbar.as_slice());
        let lu = lhs.lu();
        let mut x = lu.solve(&rhs).ok_or(SetError::Unstable(rho))?;
        // two rounds of iterative refinement
        for _ in 0..2 {
            let pm = DMatrix::from_column_slice(n, n, x.as_slice());
            let r = qbar + &at * &pm * acl - &pm;
            if let Some(dx) = lu.solve(&DVector::from_column_slice(r.as_slice())) {
                x += dx;
            }
        }
        DMatrix::from_column_slice(n, n, x.as_slice())
    } else {
        // Smith doubling
        let mut p = qbar.clone();
        let mut ak = acl.clone();
        for _ in 0..64 {
            let step = ak.transpose() * &p * &ak;
            p += &step;
            ak = &ak * &ak;
            if step.norm() <= 1e-16 * p.norm() {
                break;
            }
        }
        p
    };
    p = (&p + p.transpose()) * 0.5;
    Ok(p)
}

/// Infinite-horizon LQR solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lqr {
    #[serde(with = "crate::matser::mat")]
    pub p: DMatrix<f64>,
    /// Feedback in the convention `u = K x`, so `A + B K` is stable.
    #[serde(with = "crate::matser::mat")]
    pub k: DMatrix<f64>,
}

/// Residual of the discrete algebraic Riccati equation.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let s = r + b.transpose() * p * b;
    let g = b.transpose() * p * a;
    let corr = match s.clone().try_inverse() {
        Some(si) => g.transpose() * si * &g,
        None => return f64::INFINITY,
    };
    (a.transpose() * p * a - corr + q - p).norm()
}

fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let s = r + b.transpose() * p * b;
    let g = b.transpose() * p * a;
    -s.lu().solve(&g).expect("R + B'PB is positive definite")
}

/// Solve the DARE by fixed-point iteration followed by Newton polishing.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Lqr> {
    let n = require_square(a, "A")?;
    let m = b.ncols();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(SetError::Shape("A, B, Q, R do not conform".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(SetError::NotPositiveDefinite("R"));
    }
    const CAP: usize = 100_000;
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..CAP {
        let k = lqr_gain(a, b, r, &p);
        let next = a.transpose() * &p * (a + b * &k) + q;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        if delta <= 1e-13 * (1.0 + p.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SetError::NoConvergence(CAP));
    }
    for _ in 0..3 {
        let k = lqr_gain(a, b, r, &p);
        let acl = a + b * &k;
        let qbar = q + k.transpose() * r * &k;
        match solve_dlyap(&acl, &qbar) {
            Ok(pn) => p = pn,
            Err(_) => break,
        }
    }
    let k = lqr_gain(a, b, r, &p);
    Ok(Lqr { p, k })
}

/// Largest violation of `Acl E ⊕ W ⊆ E` measured on the rows of `E`.
pub fn rpi_margin(acl: &DMatrix<f64>, e: &Polytope, w: &Polytope) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..e.nrows() {
        let f = e.a().row(i).transpose();
        let h = e.support(&(acl.transpose() * &f))? + w.support(&f)?;
        worst = worst.max(h - e.b()[i]);
    }
    Ok(worst)
}

/// Outer approximation of the minimal robust positive invariant set.
#[derive(Debug, Clone)]
pub struct RpiSet {
    pub set: Polytope,
    pub terms: usize,
    pub alpha: f64,
}

/// `F = (1 - alpha)^-1 ⊕_{i<s} Acl^i W` with the smallest `s` such that
/// `Acl^s W ⊆ alpha W` for some `alpha <= alpha_max`. The result is checked
/// to satisfy `Acl F ⊕ W ⊆ F` within `eps`.
pub fn rpi_outer(acl: &DMatrix<f64>, w: &Polytope, alpha_max: f64, eps: f64) -> Result<RpiSet> {
    let n = require_square(acl, "Acl")?;
    if w.dim() != n {
        return Err(SetError::Shape("W dimension differs from Acl".into()));
    }
    if !w.contains(&DVector::zeros(n), 1e-12) {
        return Err(SetError::OriginNotInW);
    }
    let rho = spectral_radius(acl);
    if rho >= 1.0 {
        return Err(SetError::Unstable(rho));
    }
    const CAP: usize = 500;
    let scale = 1.0 + w.b().amax();
    let mut power = acl.clone();
    let mut found = None;
    for s in 1..=CAP {
        let mut alpha: f64 = 0.0;
        for i in 0..w.nrows() {
            let f = w.a().row(i).transpose();
            let h = w.support(&(power.transpose() * &f))?;
            let g = w.b()[i];
            let ratio = if g > 1e-12 * scale {
                h / g
            } else if h <= 1e-12 * scale {
                0.0
            } else {
                f64::INFINITY
            };
            alpha = alpha.max(ratio);
        }
        if alpha <= alpha_max {
            found = Some((s, alpha));
            break;
        }
        power = &power * acl;
    }
    let (s, alpha) = found.ok_or(SetError::AlphaUnreachable { alpha_max, cap: CAP })?;
    let mut f = w.clone();
    let mut ai = DMatrix::identity(n, n);
    for _ in 1..s {
        ai = &ai * acl;
        f = f.minkowski_sum(&w.affine_map(&ai)?)?;
    }
    let set = f.scale(1.0 / (1.0 - alpha));
    let margin = rpi_margin(acl, &set, w)?;
    if margin > eps {
        return Err(SetError::NotInvariant(margin));
    }
    Ok(RpiSet { set, terms: s, alpha })
}

/// A tube cross-section with its feedback gain and the disturbance it rejects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeDesign {
    #[serde(with = "crate::matser::mat")]
    pub gain: DMatrix<f64>,
    pub cross_section: Polytope,
    #[serde(with = "crate::matser::mat")]
    pub closed_loop: DMatrix<f64>,
    pub disturbance: Polytope,
}

impl TubeDesign {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, gain: DMatrix<f64>, cross_section: Polytope, disturbance: Polytope) -> Self {
        let closed_loop = a + b * &gain;
        TubeDesign { gain, cross_section, closed_loop, disturbance }
    }

    /// Spectral radius and RPI margin, failing when either check is violated.
    pub fn certify(&self, eps: f64) -> Result<f64> {
        let rho = spectral_radius(&self.closed_loop);
        if rho >= 1.0 {
            return Err(SetError::Unstable(rho));
        }
        let margin = rpi_margin(&self.closed_loop, &self.cross_section, &self.disturbance)?;
        if margin > eps {
            return Err(SetError::NotInvariant(margin));
        }
        Ok(margin)
    }
}

/// Terminal ingredients of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalDesign {
    #[serde(with = "crate::matser::mat")]
    pub gain_f: DMatrix<f64>,
    #[serde(with = "crate::matser::mat")]
    pub cost_matrix: DMatrix<f64>,
    pub level: f64,
    pub set: Polytope,
}

impl TerminalDesign {
    pub fn lyapunov_residual(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        let acl = a + b * &self.gain_f;
        let qbar = q + self.gain_f.transpose() * r * &self.gain_f;
        lyap_residual(&acl, &qbar, &self.cost_matrix)
    }
}

/// `{x in X : ∃ u in U, A x + B u in Ω}` by Fourier-Motzkin projection of
/// the lifted `(x, u)` polytope.
pub fn pre_set(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    omega: &Polytope,
    u: &Polytope,
    x: &Polytope,
) -> Result<Polytope> {
    let n = a.nrows();
    let m = b.ncols();
    if omega.dim() != n || x.dim() != n || u.dim() != m || b.nrows() != n {
        return Err(SetError::Shape("pre-set operands do not conform".into()));
    }
    let rows = omega.nrows() + u.nrows() + x.nrows();
    let mut la = DMatrix::zeros(rows, n + m);
    let mut lb = DVector::zeros(rows);
    let mut r = 0;
    for i in 0..omega.nrows() {
        let f = omega.a().row(i);
        la.view_mut((r, 0), (1, n)).copy_from(&(f * a));
        la.view_mut((r, n), (1, m)).copy_from(&(f * b));
        lb[r] = omega.b()[i];
        r += 1;
    }
    for i in 0..u.nrows() {
        la.view_mut((r, n), (1, m)).copy_from(&u.a().row(i));
        lb[r] = u.b()[i];
        r += 1;
    }
    for i in 0..x.nrows() {
        la.view_mut((r, 0), (1, n)).copy_from(&x.a().row(i));
        lb[r] = x.b()[i];
        r += 1;
    }
    let lifted = Polytope::new(la, lb)?;
    if lifted.is_empty() {
        return Ok(Polytope::empty(n));
    }
    Ok(lifted.project_out(m)?)
}

/// Result of a fixed-point set recursion.
#[derive(Debug, Clone)]
pub struct Recursion {
    pub set: Polytope,
    pub iterations: usize,
    pub converged: bool,
}

const FIXED_POINT_TOL: f64 = 1e-7;

/// Maximal control invariant subset of `X` under inputs in `U`.
pub fn max_control_invariant(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &Polytope,
    u: &Polytope,
    iter_cap: usize,
) -> Result<Recursion> {
    if x.is_empty() {
        return Err(PolytopeError::Empty.into());
    }
    let mut omega = x.reduce();
    for it in 1..=iter_cap {
        let next = pre_set(a, b, &omega, u, &omega)?;
        if next.is_empty() {
            return Ok(Recursion { set: next, iterations: it, converged: true });
        }
        let done = omega.subset_of(&next, FIXED_POINT_TOL)?;
        omega = next;
        if done {
            return Ok(Recursion { set: omega, iterations: it, converged: true });
        }
    }
    Ok(Recursion { set: omega, iterations: iter_cap, converged: false })
}

/// Maximal positive invariant subset of `Ω` for `x+ = Acl x`.
pub fn max_positive_invariant(acl: &DMatrix<f64>, omega: &Polytope, iter_cap: usize) -> Result<Recursion> {
    let mut o = omega.reduce();
    for it in 1..=iter_cap {
        let next = o.stack(&o.preimage(acl)?)?.reduce();
        if next.is_empty() {
            return Ok(Recursion { set: next, iterations: it, converged: true });
        }
        let done = o.subset_of(&next, FIXED_POINT_TOL)?;
        o = next;
        if done {
            return Ok(Recursion { set: o, iterations: it, converged: true });
        }
    }
    Ok(Recursion { set: o, iterations: iter_cap, converged: false })
}

/// Every vertex of `Ω` admits some `u in U` with `A v + B u in Ω`.
pub fn is_control_invariant(a: &DMatrix<f64>, b: &DMatrix<f64>, omega: &Polytope, u: &Polytope, tol: f64) -> Result<bool> {
    let m = b.ncols();
    for v in omega.vertices()? {
        let rows = omega.nrows() + u.nrows();
        let mut la = DMatrix::zeros(rows, m);
        let mut lb = DVector::zeros(rows);
        let av = a * &v;
        for i in 0..omega.nrows() {
            let f = omega.a().row(i);
            la.row_mut(i).copy_from(&(f * b));
            lb[i] = omega.b()[i] - (f * &av)[0] + tol;
        }
        for i in 0..u.nrows() {
            la.row_mut(omega.nrows() + i).copy_from(&u.a().row(i));
            lb[omega.nrows() + i] = u.b()[i] + tol;
        }
        if lp::feasible_point(&la, &lb).is_none() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// N-step controllable sets `K_0 = target`, `K_{j+1} = Pre(K_j ⊖ G) ∩ Xt`.
#[derive(Debug, Clone)]
pub struct ControllableSets {
    /// `sets[j]` is `K_j`, for `j = 0..=N` (shorter if a set became empty).
    pub sets: Vec<Polytope>,
    /// True when a nonlinearity bound `G` was supplied; the recursion then
    /// treats `g` as an additive disturbance.
    pub outer_approximation: bool,
    pub emptied: bool,
}

impl ControllableSets {
    pub fn last(&self) -> &Polytope {
        self.sets.last().expect("at least the target")
    }
}

pub fn controllable_set_n(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g_bound: Option<&Polytope>,
    xt: &Polytope,
    u: &Polytope,
    target: &Polytope,
    n: usize,
) -> Result<ControllableSets> {
    if target.is_empty() {
        return Err(PolytopeError::Empty.into());
    }
    let mut sets = vec![target.reduce()];
    for _ in 0..n {
        let cur = sets.last().unwrap();
        let shrunk = match g_bound {
            Some(g) => cur.pontryagin_diff(g)?,
            None => cur.clone(),
        };
        if shrunk.is_empty() {
            return Ok(ControllableSets { sets, outer_approximation: g_bound.is_some(), emptied: true });
        }
        let next = pre_set(a, b, &shrunk, u, xt)?;
        let empty = next.is_empty();
        sets.push(next);
        if empty {
            return Ok(ControllableSets { sets, outer_approximation: g_bound.is_some(), emptied: true });
        }
    }
    Ok(ControllableSets { sets, outer_approximation: g_bound.is_some(), emptied: false })
}

/// Inner polyhedral approximation of `{z : z'Pz <= c}`: the hull of
/// `facets` boundary points spread uniformly in whitened coordinates.
pub fn levelset_polytope(p: &DMatrix<f64>, c: f64, facets: usize) -> Result<Polytope> {
    let n = require_square(p, "P")?;
    if facets < 2 * n {
        return Err(SetError::TooSmall("facets", 2 * n));
    }
    if c <= 0.0 {
        return Err(SetError::NotPositiveDefinite("level"));
    }
    let chol = p.clone().cholesky().ok_or(SetError::NotPositiveDefinite("P"))?;
    // z = sqrt(c) L^-T u with |u| = 1
    let lt_inv = chol.l().transpose().try_inverse().ok_or(SetError::NotPositiveDefinite("P"))?;
    let dirs: Vec<DVector<f64>> = match n {
        1 => vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])],
        2 => (0..facets)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / facets as f64;
                DVector::from_vec(vec![t.cos(), t.sin()])
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..facets)
                .map(|k| {
                    let y = 1.0 - 2.0 * (k as f64 + 0.5) / facets as f64;
                    let rad = (1.0 - y * y).sqrt();
                    let th = golden * k as f64;
                    DVector::from_vec(vec![rad * th.cos(), y, rad * th.sin()])
                })
                .collect()
        }
        _ => return Err(PolytopeError::DimensionTooHigh(n).into()),
    };
    let pts: Vec<DVector<f64>> = dirs.iter().map(|u| &lt_inv * u * c.sqrt()).collect();
    Ok(crate::polytope::hull(&pts, n)?)
}

/// Symmetric box inside the bounding box of `p`, using the smaller bound per
/// coordinate.
pub fn symmetric_inner_box(p: &Polytope) -> Result<Polytope> {
    let (lo, hi) = p.bounding_box()?;
    let r: Vec<f64> = (0..p.dim()).map(|i| hi[i].min(-lo[i])).collect();
    if r.iter().any(|&v| v < 0.0) {
        return Ok(Polytope::empty(p.dim()));
    }
    Ok(Polytope::symmetric_box(&r)?)
}

/// Slope `a` minimizing `max_{|x| <= h} |f(x) - a x|`, with that bound.
pub fn minimax_slope(f: impl Fn(f64) -> f64, half_width: f64) -> (f64, f64) {
    const GRID: usize = 20_001;
    let xs: Vec<f64> = (0..GRID).map(|i| -half_width + 2.0 * half_width * i as f64 / (GRID - 1) as f64).collect();
    let fx: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let err = |a: f64| xs.iter().zip(&fx).map(|(x, y)| (y - a * x).abs()).fold(0.0, f64::max);
    let bracket = xs
        .iter()
        .zip(&fx)
        .filter(|(x, _)| x.abs() > 1e-9)
        .map(|(x, y)| (y / x).abs())
        .fold(1.0, f64::max);
    let (mut lo, mut hi) = (-bracket, bracket);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if err(m1) <= err(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let a = 0.5 * (lo + hi);
    (a, err(a))
}
