//! Dense simplex for the small linear programs behind support functions,
//! redundancy removal, emptiness checks and QP phase-1.
//!
//! Problems are posed as `max c'x s.t. A x <= b` with `x` free. Internally the
//! dual `min b'y s.t. A'y = c, y >= 0` is solved in standard form, which keeps
//! the tableau at `n + 1` rows even when `A` has hundreds of rows.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: DVector<f64>,
    pub value: f64,
}

/// Maximize `c'x` subject to `A x <= b`, `x` free.
pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpSolution {
    let n = c.len();
    assert_eq!(a.ncols(), n, "lp: column count mismatch");
    assert_eq!(a.nrows(), b.len(), "lp: row count mismatch");

    let at = a.transpose();
    // A perturbed right-hand side breaks the heavy degeneracy of slack and
    // support problems; the recovered point depends on the basis only.
    let mut std = StandardForm::solve(&at, c, b, true);
    if std.status != LpStatus::Optimal {
        std = StandardForm::solve(&at, c, b, false);
    }
    match std.status {
        LpStatus::Optimal => {
            let x = std.duals;
            let value = c.dot(&x);
            LpSolution { status: LpStatus::Optimal, x, value }
        }
        LpStatus::Unbounded => infeasible(n),
        LpStatus::Infeasible => match feasible_point(a, b) {
            Some(x) => LpSolution { status: LpStatus::Unbounded, x, value: f64::INFINITY },
            None => infeasible(n),
        },
        LpStatus::IterationLimit => LpSolution {
            status: LpStatus::IterationLimit,
            x: DVector::zeros(n),
            value: f64::NAN,
        },
    }
}

/// Minimize `c'x` subject to `A x <= b`.
pub fn minimize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpSolution {
    let mut sol = maximize(&(-c), a, b);
    sol.value = -sol.value;
    sol
}

fn infeasible(n: usize) -> LpSolution {
    LpSolution { status: LpStatus::Infeasible, x: DVector::zeros(n), value: f64::NEG_INFINITY }
}

/// Deepest point of `{A x <= b}` in the sense of the largest uniform slack
/// `t` (capped at 1). Returns `(x, t)`; the set is nonempty iff `t >= -tol`.
/// Rows are used as given, so `t` is a Chebyshev radius only for unit rows.
pub fn max_slack_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let (m, n) = a.shape();
    let mut aa = DMatrix::zeros(m + 1, n + 1);
    aa.view_mut((0, 0), (m, n)).copy_from(a);
    for i in 0..m {
        aa[(i, n)] = 1.0;
    }
    aa[(m, n)] = 1.0;
    let mut bb = DVector::zeros(m + 1);
    bb.rows_mut(0, m).copy_from(b);
    bb[m] = 1.0;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let sol = maximize(&c, &aa, &bb);
    if sol.status != LpStatus::Optimal {
        return None;
    }
    let t = sol.x[n];
    Some((sol.x.rows(0, n).into_owned(), t))
}

/// Any point of `{A x <= b}` (within `1e-9` relative slack), if one exists.
pub fn feasible_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = 1.0 + b.amax();
    let (x, t) = max_slack_point(a, b)?;
    if t >= -1e-9 * scale {
        Some(x)
    } else {
        None
    }
}

struct StdResult {
    status: LpStatus,
    duals: DVector<f64>,
}

/// `min d'y s.t. M y = r, y >= 0` by two-phase tableau simplex with
/// artificial columns kept in place so the equality duals can be read off
/// the final reduced costs.
struct StandardForm {
    p: usize,
    width: usize,
    t: Vec<f64>,
    basis: Vec<usize>,
    dead: Vec<bool>,
    bland: bool,
    degenerate_run: usize,
}

impl StandardForm {
    fn solve(m: &DMatrix<f64>, r: &DVector<f64>, d: &DVector<f64>, perturb: bool) -> StdResult {
        let (p, q) = m.shape();
        let width = q + p + 1;
        let mut sf = StandardForm {
            p,
            width,
            t: vec![0.0; (p + 1) * width],
            basis: (0..p).map(|i| q + i).collect(),
            dead: vec![false; p],
            bland: false,
            degenerate_run: 0,
        };
        let mut sign = vec![1.0; p];
        for i in 0..p {
            if r[i] < 0.0 {
                sign[i] = -1.0;
            }
            for j in 0..q {
                sf.t[i * width + j] = sign[i] * m[(i, j)];
            }
            sf.t[i * width + q + i] = 1.0;
            sf.t[i * width + width - 1] = sign[i] * r[i];
            if perturb {
                let u = ((i * 7919 + 13) % 997) as f64 / 997.0;
                sf.t[i * width + width - 1] += 1e-9 * (1.0 + r.amax()) * (1.0 + u);
            }
        }
        // phase 1: minimize the sum of artificials
        for j in 0..q {
            let mut s = 0.0;
            for i in 0..p {
                s += sf.t[i * width + j];
            }
            sf.t[p * width + j] = -s;
        }
        let mut s = 0.0;
        for i in 0..p {
            s += sf.t[i * width + width - 1];
        }
        sf.t[p * width + width - 1] = -s;

        let cap = 50 * (p + q) + 1000;
        let st = sf.iterate(q, cap);
        if st == LpStatus::IterationLimit {
            return StdResult { status: st, duals: DVector::zeros(p) };
        }
        let phase1 = -sf.t[p * width + width - 1];
        let rscale = 1.0 + r.amax();
        if phase1 > 1e-9 * rscale {
            return StdResult { status: LpStatus::Infeasible, duals: DVector::zeros(p) };
        }
        // drive remaining artificials out of the basis
        for i in 0..p {
            if sf.basis[i] < q {
                continue;
            }
            let mut best = None;
            let mut bestv = 1e-9;
            for j in 0..q {
                let v = sf.t[i * width + j].abs();
                if v > bestv {
                    bestv = v;
                    best = Some(j);
                }
            }
            match best {
                Some(j) => sf.pivot(i, j),
                None => sf.dead[i] = true,
            }
        }
        // phase 2 objective
        for j in 0..width {
            sf.t[p * width + j] = if j < q { d[j] } else { 0.0 };
        }
        for i in 0..p {
            let bi = sf.basis[i];
            if bi < q {
                let cb = d[bi];
                if cb != 0.0 {
                    for j in 0..width {
                        sf.t[p * width + j] -= cb * sf.t[i * width + j];
                    }
                }
            }
        }
        sf.bland = false;
        sf.degenerate_run = 0;
        let st = sf.iterate(q, cap);
        if st != LpStatus::Optimal {
            return StdResult { status: st, duals: DVector::zeros(p) };
        }
        let duals = DVector::from_fn(p, |i, _| -sf.t[p * width + q + i] * sign[i]);
        StdResult { status: LpStatus::Optimal, duals }
    }

    fn iterate(&mut self, allowed: usize, cap: usize) -> LpStatus {
        let (p, w) = (self.p, self.width);
        let mut dscale = 1.0f64;
        for j in 0..allowed {
            dscale = dscale.max(self.t[p * w + j].abs());
        }
        let dtol = 1e-10 * dscale;
        for _ in 0..cap {
            let obj = &self.t[p * w..(p + 1) * w];
            let mut enter = None;
            if self.bland {
                for (j, &v) in obj.iter().enumerate().take(allowed) {
                    if v < -dtol {
                        enter = Some(j);
                        break;
                    }
                }
            } else {
                let mut best = -dtol;
                for (j, &v) in obj.iter().enumerate().take(allowed) {
                    if v < best {
                        best = v;
                        enter = Some(j);
                    }
                }
            }
            let Some(j) = enter else {
                return LpStatus::Optimal;
            };
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..p {
                if self.dead[i] {
                    continue;
                }
                let aij = self.t[i * w + j];
                if aij > 1e-9 {
                    let ratio = self.t[i * w + w - 1].max(0.0) / aij;
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            ratio < best_ratio - 1e-12 * (1.0 + best_ratio)
                                || (ratio <= best_ratio + 1e-12 * (1.0 + best_ratio)
                                    && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(i);
                    }
                }
            }
            let Some(i) = leave else {
                return LpStatus::Unbounded;
            };
            if best_ratio <= 1e-10 {
                self.degenerate_run += 1;
                if self.degenerate_run > 30 {
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
            }
            self.pivot(i, j);
        }
        LpStatus::IterationLimit
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let piv = self.t[r * w + c];
        for j in 0..w {
            self.t[r * w + j] /= piv;
        }
        self.t[r * w + c] = 1.0;
        let (before, rest) = self.t.split_at_mut(r * w);
        let (row, after) = rest.split_at_mut(w);
        let eliminate = |other: &mut [f64]| {
            let f = other[c];
            if f != 0.0 {
                for j in 0..w {
                    other[j] -= f * row[j];
                }
                other[c] = 0.0;
            }
        };
        for chunk in before.chunks_mut(w) {
            eliminate(chunk);
        }
        for chunk in after.chunks_mut(w) {
            eliminate(chunk);
        }
        self.basis[r] = c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> (DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        (a, DVector::from_element(4, 1.0))
    }

    #[test]
    fn box_support() {
        let (a, b) = unit_box();
        let s = maximize(&DVector::from_vec(vec![1.0, 1.0]), &a, &b);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 2.0).abs() < 1e-12);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_box_needs_phase_one() {
        // 2 <= x <= 3, 5 <= y <= 7
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![3.0, -2.0, 7.0, -5.0]);
        let s = minimize(&DVector::from_vec(vec![1.0, 2.0]), &a, &b);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 12.0).abs() < 1e-10);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]);
        let s = maximize(&DVector::from_vec(vec![1.0]), &a, &b);
        assert_eq!(s.status, LpStatus::Infeasible);

        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0]);
        let s = maximize(&DVector::from_vec(vec![0.0, 1.0]), &a, &b);
        assert_eq!(s.status, LpStatus::Unbounded);
    }

    #[test]
    fn degenerate_redundant_rows() {
        // many copies of the same facets plus a degenerate vertex
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for _ in 0..5 {
            rows.extend_from_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
            rhs.extend_from_slice(&[1.0, 1.0, 2.0, 0.0, 0.0]);
        }
        let a = DMatrix::from_row_slice(25, 2, &rows);
        let b = DVector::from_vec(rhs);
        let s = maximize(&DVector::from_vec(vec![1.0, 1.0]), &a, &b);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn slack_point_of_thin_set() {
        // segment {0} x [-1, 1] has zero slack but is nonempty
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let (_, t) = max_slack_point(&a, &b).unwrap();
        assert!(t.abs() < 1e-12);
        assert!(feasible_point(&a, &b).is_some());
    }
}
