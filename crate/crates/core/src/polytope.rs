//! Convex polytopes in halfspace representation `{x : A x <= b}`.
//!
//! Rows are stored with unit-norm normals. Minkowski sums and general affine
//! images go through vertex enumeration, so those operations are limited to
//! dimension 3; everything else works in any dimension.

use crate::lp::{self, LpStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance of the per-row redundancy LP in [`Polytope::reduce`].
pub const REDUNDANCY_TOL: f64 = 1e-9;

const VERTEX_DIM_MAX: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lower bound exceeds upper bound in coordinate {0}")]
    InvertedBounds(usize),
    #[error("polytope is empty")]
    Empty,
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("operation needs dimension <= {VERTEX_DIM_MAX}, got {0}")]
    DimensionTooHigh(usize),
    #[error("non-finite data")]
    NonFinite,
    #[error("LP solver hit its iteration limit")]
    LpFailure,
}

pub type Result<T> = std::result::Result<T, PolytopeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// Axis-aligned box, convertible to a [`Polytope`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(PolytopeError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(PolytopeError::InvertedBounds(i));
        }
        Ok(AxisBox { lower, upper })
    }

    pub fn to_polytope(&self) -> Polytope {
        Polytope::from_box(&self.lower, &self.upper).expect("validated box")
    }
}

impl Polytope {
    /// Build from raw rows. Normals are scaled to unit length; zero rows are
    /// dropped (or make the set empty when their offset is negative).
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(PolytopeError::DimensionMismatch { expected: a.nrows(), got: b.len() });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PolytopeError::NonFinite);
        }
        let n = a.ncols();
        let mut rows = Vec::with_capacity(a.nrows());
        let mut rhs = Vec::with_capacity(a.nrows());
        for i in 0..a.nrows() {
            let norm = a.row(i).norm();
            if norm < 1e-14 {
                if b[i] < -1e-12 {
                    return Ok(Polytope::empty(n));
                }
                continue;
            }
            rows.push(a.row(i) / norm);
            rhs.push(b[i] / norm);
        }
        let a = if rows.is_empty() { DMatrix::zeros(0, n) } else { DMatrix::from_rows(&rows) };
        Ok(Polytope { a, b: DVector::from_vec(rhs) })
    }

    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        let bx = AxisBox::new(lower.to_vec(), upper.to_vec())?;
        let n = bx.lower.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = bx.upper[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -bx.lower[i];
        }
        Polytope::new(a, b)
    }

    /// Box `|x_i| <= r_i`.
    pub fn symmetric_box(r: &[f64]) -> Result<Self> {
        let lower: Vec<f64> = r.iter().map(|v| -v).collect();
        Polytope::from_box(&lower, r)
    }

    pub fn point(x: &DVector<f64>) -> Self {
        Polytope::from_box(x.as_slice(), x.as_slice()).expect("point box")
    }

    pub fn origin(dim: usize) -> Self {
        Polytope::point(&DVector::zeros(dim))
    }

    /// Canonical empty set: `x_1 <= -1` and `x_1 >= 1`.
    pub fn empty(dim: usize) -> Self {
        let mut a = DMatrix::zeros(2, dim.max(1));
        a[(0, 0)] = 1.0;
        a[(1, 0)] = -1.0;
        Polytope { a, b: DVector::from_vec(vec![-1.0, -1.0]) }
    }

    /// The whole space (no rows).
    pub fn full(dim: usize) -> Self {
        Polytope { a: DMatrix::zeros(0, dim), b: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if self.dim() != n {
            return Err(PolytopeError::DimensionMismatch { expected: self.dim(), got: n });
        }
        Ok(())
    }

    /// Largest row violation `max_i (a_i'x - b_i)`; nonpositive inside.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        if self.nrows() == 0 {
            return f64::NEG_INFINITY;
        }
        (&self.a * x - &self.b).max()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && self.violation(x) <= tol
    }

    /// Support function `h(d) = max_{x in P} d'x`.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64> {
        self.check_dim(d.len())?;
        let sol = lp::maximize(d, &self.a, &self.b);
        match sol.status {
            LpStatus::Optimal => Ok(sol.value),
            LpStatus::Infeasible => Err(PolytopeError::Empty),
            LpStatus::Unbounded => Err(PolytopeError::Unbounded),
            LpStatus::IterationLimit => Err(PolytopeError::LpFailure),
        }
    }

    /// Chebyshev center and radius; `None` when empty.
    pub fn chebyshev(&self) -> Option<(DVector<f64>, f64)> {
        let (x, r) = lp::max_slack_point(&self.a, &self.b)?;
        if r < -1e-9 * (1.0 + self.b.amax()) {
            None
        } else {
            Some((x, r.max(0.0)))
        }
    }

    pub fn is_empty(&self) -> bool {
        self.chebyshev().is_none()
    }

    pub fn is_bounded(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let n = self.dim();
        (0..n).all(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            self.support(&e).is_ok() && self.support(&(-e)).is_ok()
        })
    }

    /// Drop duplicate and redundant rows. An empty input returns the
    /// canonical empty polytope.
    pub fn reduce(&self) -> Polytope {
        let n = self.dim();
        if self.is_empty() {
            return Polytope::empty(n);
        }
        // duplicates: keep the tightest offset per normal
        let mut keep: Vec<usize> = Vec::new();
        'rows: for i in 0..self.nrows() {
            for k in keep.iter_mut() {
                if (self.a.row(i) - self.a.row(*k)).amax() < 1e-12 {
                    if self.b[i] < self.b[*k] {
                        *k = i;
                    }
                    continue 'rows;
                }
            }
            keep.push(i);
        }
        let mut active = vec![true; keep.len()];
        for idx in 0..keep.len() {
            let i = keep[idx];
            let others: Vec<usize> =
                (0..keep.len()).filter(|&j| j != idx && active[j]).map(|j| keep[j]).collect();
            let mut a = DMatrix::zeros(others.len() + 1, n);
            let mut b = DVector::zeros(others.len() + 1);
            for (r, &j) in others.iter().enumerate() {
                a.row_mut(r).copy_from(&self.a.row(j));
                b[r] = self.b[j];
            }
            a.row_mut(others.len()).copy_from(&self.a.row(i));
            b[others.len()] = self.b[i] + 1.0;
            let sol = lp::maximize(&self.a.row(i).transpose(), &a, &b);
            if sol.status == LpStatus::Optimal
                && sol.value <= self.b[i] + REDUNDANCY_TOL * (1.0 + self.b[i].abs())
            {
                active[idx] = false;
            }
        }
        let rows: Vec<usize> = (0..keep.len()).filter(|&j| active[j]).map(|j| keep[j]).collect();
        self.select_rows(&rows)
    }

    fn select_rows(&self, rows: &[usize]) -> Polytope {
        let n = self.dim();
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            a.row_mut(r).copy_from(&self.a.row(i));
            b[r] = self.b[i];
        }
        Polytope { a, b }
    }

    /// Stack the rows of both sets (unreduced).
    pub fn stack(&self, q: &Polytope) -> Result<Polytope> {
        self.check_dim(q.dim())?;
        let n = self.dim();
        let m = self.nrows() + q.nrows();
        let mut a = DMatrix::zeros(m, n);
        a.view_mut((0, 0), (self.nrows(), n)).copy_from(&self.a);
        a.view_mut((self.nrows(), 0), (q.nrows(), n)).copy_from(&q.a);
        let mut b = DVector::zeros(m);
        b.rows_mut(0, self.nrows()).copy_from(&self.b);
        b.rows_mut(self.nrows(), q.nrows()).copy_from(&q.b);
        Ok(Polytope { a, b })
    }

    pub fn intersect(&self, q: &Polytope) -> Result<Polytope> {
        Ok(self.stack(q)?.reduce())
    }

    pub fn translate(&self, t: &DVector<f64>) -> Result<Polytope> {
        self.check_dim(t.len())?;
        Ok(Polytope { a: self.a.clone(), b: &self.b + &self.a * t })
    }

    /// `{s x : x in P}`; `s = 0` gives the origin.
    pub fn scale(&self, s: f64) -> Polytope {
        assert!(s >= 0.0, "negative scale factor");
        if s == 0.0 {
            return if self.is_empty() { Polytope::empty(self.dim()) } else { Polytope::origin(self.dim()) };
        }
        Polytope { a: self.a.clone(), b: &self.b * s }
    }

    /// Preimage `{x : M x in P}` with `M` of shape `P.dim x n`.
    pub fn preimage(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        self.check_dim(m.nrows())?;
        Polytope::new(&self.a * m, self.b.clone())
    }

    /// Image `{M x : x in P}`.
    pub fn affine_map(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        self.check_dim(m.ncols())?;
        if self.is_empty() {
            return Ok(Polytope::empty(m.nrows()));
        }
        if m.is_square() {
            if let Some(inv) = m.clone().try_inverse() {
                // Ill-conditioned maps give nearly parallel facet pairs whose
                // support LPs are unreliable; those go through the vertices.
                let cond = m.norm() * inv.norm();
                if cond.is_finite() && cond < 1e4 {
                    return Polytope::new(&self.a * inv, self.b.clone());
                }
            }
        }
        if !self.is_bounded() {
            return Err(PolytopeError::Unbounded);
        }
        let verts = self.vertices()?;
        let img: Vec<DVector<f64>> = verts.iter().map(|v| m * v).collect();
        hull(&img, m.nrows())
    }

    /// Exact Minkowski sum via vertex enumeration and convex hull.
    pub fn minkowski_sum(&self, q: &Polytope) -> Result<Polytope> {
        self.check_dim(q.dim())?;
        if self.dim() > VERTEX_DIM_MAX {
            return Err(PolytopeError::DimensionTooHigh(self.dim()));
        }
        if self.is_empty() || q.is_empty() {
            return Ok(Polytope::empty(self.dim()));
        }
        if !self.is_bounded() || !q.is_bounded() {
            return Err(PolytopeError::Unbounded);
        }
        let vp = self.vertices()?;
        let vq = q.vertices()?;
        let mut pts = Vec::with_capacity(vp.len() * vq.len());
        for x in &vp {
            for y in &vq {
                pts.push(x + y);
            }
        }
        hull(&pts, self.dim())
    }

    /// Pontryagin difference `{x : x + q in P for all q in Q}`. May be empty,
    /// in which case the canonical empty polytope is returned.
    pub fn pontryagin_diff(&self, q: &Polytope) -> Result<Polytope> {
        self.check_dim(q.dim())?;
        if q.is_empty() {
            return Ok(Polytope::full(self.dim()));
        }
        let mut b = self.b.clone();
        for i in 0..self.nrows() {
            b[i] -= q.support(&self.a.row(i).transpose())?;
        }
        let out = Polytope { a: self.a.clone(), b };
        Ok(out.reduce())
    }

    /// `P ⊆ Q` up to `tol` on support values.
    pub fn subset_of(&self, q: &Polytope, tol: f64) -> Result<bool> {
        self.check_dim(q.dim())?;
        if self.is_empty() {
            return Ok(true);
        }
        for i in 0..q.nrows() {
            match self.support(&q.a.row(i).transpose()) {
                Ok(h) => {
                    if h > q.b[i] + tol {
                        return Ok(false);
                    }
                }
                Err(PolytopeError::Unbounded) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Mutual containment up to `tol`.
    pub fn approx_eq(&self, q: &Polytope, tol: f64) -> Result<bool> {
        Ok(self.subset_of(q, tol)? && q.subset_of(self, tol)?)
    }

    /// Vertices by brute force over `dim`-subsets of rows (dimension <= 3).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        if n > VERTEX_DIM_MAX {
            return Err(PolytopeError::DimensionTooHigh(n));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.reduce();
        let m = p.nrows();
        let scale = 1.0 + p.b.amax();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut push = |v: DVector<f64>| {
            if !out.iter().any(|w| (w - &v).amax() <= 1e-7 * scale) {
                out.push(v);
            }
        };
        let mut idx: Vec<usize> = (0..n).collect();
        if m < n {
            return Err(PolytopeError::Unbounded);
        }
        loop {
            let mut sa = DMatrix::zeros(n, n);
            let mut sb = DVector::zeros(n);
            for (r, &i) in idx.iter().enumerate() {
                sa.row_mut(r).copy_from(&p.a.row(i));
                sb[r] = p.b[i];
            }
            if sa.determinant().abs() > 1e-10 {
                if let Some(x) = sa.lu().solve(&sb) {
                    if p.violation(&x) <= 1e-9 * scale {
                        push(x);
                    }
                }
            }
            // next combination
            let mut k = n;
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                if idx[k] < m - n + k {
                    idx[k] += 1;
                    for j in k + 1..n {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    /// Vertices of a 2-D polytope in counterclockwise order.
    pub fn vertices_2d(&self) -> Result<Vec<DVector<f64>>> {
        if self.dim() != 2 {
            return Err(PolytopeError::DimensionMismatch { expected: 2, got: self.dim() });
        }
        let mut v = self.vertices()?;
        if v.len() < 2 {
            return Ok(v);
        }
        let c = v.iter().fold(DVector::zeros(2), |acc, x| acc + x) / v.len() as f64;
        v.sort_by(|p, q| {
            let ap = (p[1] - c[1]).atan2(p[0] - c[0]);
            let aq = (q[1] - c[1]).atan2(q[0] - c[0]);
            ap.partial_cmp(&aq).unwrap()
        });
        Ok(v)
    }

    /// Area of a 2-D polytope (shoelace over ordered vertices).
    pub fn area_2d(&self) -> Result<f64> {
        let v = self.vertices_2d()?;
        let mut s = 0.0;
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            s += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        Ok(0.5 * s.abs())
    }

    /// Componentwise bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            hi[i] = self.support(&e)?;
            lo[i] = -self.support(&(-e))?;
        }
        Ok((lo, hi))
    }

    /// Fourier-Motzkin elimination of the trailing `k` coordinates.
    pub fn project_out(&self, k: usize) -> Result<Polytope> {
        assert!(k <= self.dim());
        let mut cur = self.reduce();
        for _ in 0..k {
            let n = cur.dim();
            let last = n - 1;
            let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..cur.nrows() {
                let c = cur.a[(i, last)];
                if c > 1e-12 {
                    pos.push(i);
                } else if c < -1e-12 {
                    neg.push(i);
                } else {
                    zero.push(i);
                }
            }
            let mut rows: Vec<nalgebra::RowDVector<f64>> = Vec::new();
            let mut rhs = Vec::new();
            for &i in &zero {
                rows.push(cur.a.row(i).columns(0, last).into_owned());
                rhs.push(cur.b[i]);
            }
            for &i in &pos {
                for &j in &neg {
                    let ci = cur.a[(i, last)];
                    let cj = -cur.a[(j, last)];
                    let r = cur.a.row(i).columns(0, last) / ci + cur.a.row(j).columns(0, last) / cj;
                    rows.push(r);
                    rhs.push(cur.b[i] / ci + cur.b[j] / cj);
                }
            }
            let a = if rows.is_empty() { DMatrix::zeros(0, last) } else { DMatrix::from_rows(&rows) };
            cur = Polytope::new(a, DVector::from_vec(rhs))?.reduce();
        }
        Ok(cur)
    }
}

/// Convex hull of a point cloud in dimension <= 3, as a reduced polytope.
/// Lower-dimensional clouds are handled by detecting the affine hull.
pub fn hull(points: &[DVector<f64>], dim: usize) -> Result<Polytope> {
    if dim > VERTEX_DIM_MAX {
        return Err(PolytopeError::DimensionTooHigh(dim));
    }
    if points.is_empty() {
        return Ok(Polytope::empty(dim));
    }
    for p in points {
        if p.len() != dim {
            return Err(PolytopeError::DimensionMismatch { expected: dim, got: p.len() });
        }
    }
    let scale = points.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let mut pts: Vec<DVector<f64>> = Vec::new();
    for p in points {
        if !pts.iter().any(|q| (q - p).amax() <= 1e-10 * scale) {
            pts.push(p.clone());
        }
    }
    let c = pts.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / pts.len() as f64;
    let mut centered = DMatrix::zeros(dim, pts.len());
    for (j, p) in pts.iter().enumerate() {
        centered.set_column(j, &(p - &c));
    }
    let svd = centered.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let sv = &svd.singular_values;
    // nalgebra does not sort singular values; order them descending
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    let rank = order.iter().filter(|&&i| sv[i] > 1e-9 * scale).count();
    let mut basis = DMatrix::zeros(dim, rank);
    for (k, &i) in order.iter().take(rank).enumerate() {
        basis.set_column(k, &u.column(i));
    }
    // orthogonal complement of the affine hull
    let comp = complement(&basis, dim);

    let mut rows: Vec<nalgebra::RowDVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for k in 0..comp.ncols() {
        let n = comp.column(k).transpose();
        let off = (&n * &c)[0];
        rows.push(n.clone());
        rhs.push(off);
        rows.push(-n);
        rhs.push(-off);
    }
    let reduced: Vec<DVector<f64>> = pts.iter().map(|p| basis.transpose() * (p - &c)).collect();
    let facets: Vec<(DVector<f64>, f64)> = match rank {
        0 => Vec::new(),
        1 => {
            let lo = reduced.iter().map(|y| y[0]).fold(f64::INFINITY, f64::min);
            let hi = reduced.iter().map(|y| y[0]).fold(f64::NEG_INFINITY, f64::max);
            vec![(DVector::from_vec(vec![1.0]), hi), (DVector::from_vec(vec![-1.0]), -lo)]
        }
        2 => hull_2d(&reduced),
        _ => hull_3d(&reduced),
    };
    for (n, h) in facets {
        let normal = &basis * &n;
        let off = h + normal.dot(&c);
        rows.push(normal.transpose());
        rhs.push(off);
    }
    let a = if rows.is_empty() { DMatrix::zeros(0, dim) } else { DMatrix::from_rows(&rows) };
    Ok(Polytope::new(a, DVector::from_vec(rhs))?.reduce())
}

fn complement(basis: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let r = basis.ncols();
    let mut cols: Vec<DVector<f64>> = (0..r).map(|k| basis.column(k).into_owned()).collect();
    let mut out = Vec::new();
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        for q in &cols {
            let d = q.dot(&e);
            e -= q * d;
        }
        if e.norm() > 1e-6 {
            let e = e.normalize();
            cols.push(e.clone());
            out.push(e);
        }
        if cols.len() == dim {
            break;
        }
    }
    if out.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&out)
    }
}

/// Andrew's monotone chain; returns outward unit normals with offsets.
fn hull_2d(pts: &[DVector<f64>]) -> Vec<(DVector<f64>, f64)> {
    let mut p: Vec<(f64, f64)> = pts.iter().map(|v| (v[0], v[1])).collect();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = p.iter().map(|q| q.0.abs().max(q.1.abs())).fold(1.0, f64::max);
    let eps = 1e-12 * scale * scale;
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= eps {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= eps {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let h = lower;
    let mut out = Vec::new();
    for i in 0..h.len() {
        let (a, b) = (h[i], h[(i + 1) % h.len()]);
        let n = DVector::from_vec(vec![b.1 - a.1, a.0 - b.0]);
        let len = n.norm();
        if len == 0.0 {
            continue;
        }
        let n = n / len;
        let off = n[0] * a.0 + n[1] * a.1;
        out.push((n, off));
    }
    out
}

/// Brute-force facet search for full-dimensional 3-D clouds.
fn hull_3d(pts: &[DVector<f64>]) -> Vec<(DVector<f64>, f64)> {
    let k = pts.len();
    let scale = pts.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let eps = 1e-9 * scale;
    let mut out: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            for l in j + 1..k {
                let u = &pts[j] - &pts[i];
                let v = &pts[l] - &pts[i];
                let n = u.cross(&v);
                let len = n.norm();
                if len < 1e-12 * scale * scale {
                    continue;
                }
                let n = n / len;
                let off = n.dot(&pts[i]);
                let (mut above, mut below) = (false, false);
                for p in pts {
                    let s = n.dot(p) - off;
                    if s > eps {
                        above = true;
                    } else if s < -eps {
                        below = true;
                    }
                    if above && below {
                        break;
                    }
                }
                let cand = match (above, below) {
                    (false, _) => Some((n, off)),
                    (true, false) => Some((-n, -off)),
                    _ => None,
                };
                if let Some((n, off)) = cand {
                    if !out.iter().any(|(m, o)| (m - &n).amax() < 1e-9 && (o - off).abs() < eps) {
                        out.push((n, off));
                    }
                }
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct PolytopeJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

impl Serialize for Polytope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let a = (0..self.nrows()).map(|i| self.a.row(i).iter().copied().collect()).collect();
        let dim = if self.nrows() == 0 { Some(self.dim()) } else { None };
        PolytopeJson { a, b: self.b.iter().copied().collect(), dim }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = PolytopeJson::deserialize(d)?;
        let n = match (j.a.first(), j.dim) {
            (Some(r), _) => r.len(),
            (None, Some(n)) => n,
            (None, None) => return Err(D::Error::custom("polytope without rows needs \"dim\"")),
        };
        if j.a.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("ragged normal matrix"));
        }
        let flat: Vec<f64> = j.a.iter().flatten().copied().collect();
        let a = DMatrix::from_row_slice(j.a.len(), n, &flat);
        Polytope::new(a, DVector::from_vec(j.b)).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn unit() -> Polytope {
        Polytope::symmetric_box(&[1.0, 1.0]).unwrap()
    }

    #[test]
    fn box_construction() {
        let p = unit();
        assert_eq!(p.nrows(), 4);
        let x = Polytope::from_box(&[-50.0, -10000.0], &[10000.0, 10000.0]).unwrap();
        assert!(x.contains(&v(&[-50.0, 0.0]), 0.0));
        assert!(!x.contains(&v(&[-50.1, 0.0]), 0.0));
        let z = Polytope::from_box(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(!z.is_empty());
        assert!(matches!(Polytope::from_box(&[1.0], &[0.0]), Err(PolytopeError::InvertedBounds(0))));
        assert!(matches!(Polytope::from_box(&[1.0], &[0.0, 1.0]), Err(PolytopeError::DimensionMismatch { .. })));
    }

    #[test]
    fn box_sum_and_erosion() {
        let s = unit().minkowski_sum(&unit()).unwrap();
        assert!(s.approx_eq(&Polytope::symmetric_box(&[2.0, 2.0]).unwrap(), 1e-9).unwrap());
        let big = Polytope::symmetric_box(&[10.0, 10.0]).unwrap();
        let d = big.pontryagin_diff(&unit()).unwrap();
        assert!(d.approx_eq(&Polytope::symmetric_box(&[9.0, 9.0]).unwrap(), 1e-9).unwrap());
    }

    #[test]
    fn sum_with_point_translates() {
        let t = v(&[40.0, 0.0]);
        let s = Polytope::point(&t).minkowski_sum(&unit()).unwrap();
        assert!(s.approx_eq(&unit().translate(&t).unwrap(), 1e-9).unwrap());
    }

    #[test]
    fn empty_difference_is_flagged() {
        let d = unit().pontryagin_diff(&Polytope::symmetric_box(&[2.0, 0.5]).unwrap()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn supports() {
        assert!((unit().support(&v(&[1.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((unit().support(&v(&[1.0, 1.0])).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(Polytope::empty(2).support(&v(&[1.0, 0.0])), Err(PolytopeError::Empty));
    }

    #[test]
    fn membership_tolerance() {
        assert!(unit().contains(&v(&[0.0, 0.0]), 0.0));
        assert!(unit().contains(&v(&[1.0 + 1e-12, 0.0]), 1e-9));
        assert!(!unit().contains(&v(&[1.0 + 1e-6, 0.0]), 1e-9));
    }

    #[test]
    fn subsets() {
        let two = Polytope::symmetric_box(&[2.0, 2.0]).unwrap();
        assert!(unit().subset_of(&two, 0.0).unwrap());
        assert!(!two.subset_of(&unit(), 0.0).unwrap());
    }

    #[test]
    fn intersections_and_vertices() {
        let shifted = unit().translate(&v(&[1.0, 1.0])).unwrap();
        let i = unit().intersect(&shifted).unwrap();
        assert!(i.approx_eq(&Polytope::from_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1e-9).unwrap());
        let far = unit().translate(&v(&[5.0, 0.0])).unwrap();
        assert!(unit().intersect(&far).unwrap().is_empty());
        assert_eq!(unit().vertices_2d().unwrap().len(), 4);
        assert!(Polytope::symmetric_box(&[1.0, 1.0, 1.0]).unwrap().vertices_2d().is_err());
    }

    #[test]
    fn ccw_order() {
        let vs = unit().vertices_2d().unwrap();
        let mut s = 0.0;
        for i in 0..vs.len() {
            let j = (i + 1) % vs.len();
            s += vs[i][0] * vs[j][1] - vs[j][0] * vs[i][1];
        }
        assert!(s > 0.0);
        assert!((unit().area_2d().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn maps() {
        let id = DMatrix::identity(2, 2);
        assert!(unit().affine_map(&id).unwrap().approx_eq(&unit(), 1e-12).unwrap());
        let two = unit().affine_map(&(id * 2.0)).unwrap();
        assert!(two.approx_eq(&Polytope::symmetric_box(&[2.0, 2.0]).unwrap(), 1e-12).unwrap());
        let k = DMatrix::from_row_slice(1, 2, &[0.2054, 0.7835]);
        let img = unit().affine_map(&k).unwrap();
        assert_eq!(img.dim(), 1);
        assert!((img.support(&v(&[1.0])).unwrap() - 0.9889).abs() < 1e-12);
    }

    #[test]
    fn ill_conditioned_image_stays_bounded() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.28, 1.0, 0.28 + 1e-7]);
        let img = unit().affine_map(&m).unwrap();
        assert!(img.is_bounded());
        let s = img.minkowski_sum(&unit()).unwrap();
        assert!((s.support(&v(&[1.0, 0.0])).unwrap() - 2.28).abs() < 1e-6);
    }

    #[test]
    fn degenerate_hull() {
        // segment {0} x [-1, 1]
        let pts = vec![v(&[0.0, -1.0]), v(&[0.0, 1.0]), v(&[0.0, 0.3])];
        let s = hull(&pts, 2).unwrap();
        assert!(s.contains(&v(&[0.0, 0.5]), 1e-12));
        assert!(!s.contains(&v(&[1e-6, 0.5]), 1e-9));
        assert!((s.support(&v(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        // sum of a segment with a box stays exact
        let sum = s.minkowski_sum(&unit()).unwrap();
        assert!(sum.approx_eq(&Polytope::symmetric_box(&[1.0, 2.0]).unwrap(), 1e-9).unwrap());
    }

    #[test]
    fn three_d_hull() {
        let cube = Polytope::symmetric_box(&[1.0, 2.0, 3.0]).unwrap();
        let h = hull(&cube.vertices().unwrap(), 3).unwrap();
        assert!(h.approx_eq(&cube, 1e-9).unwrap());
        assert_eq!(h.nrows(), 6);
    }

    #[test]
    fn fourier_motzkin() {
        // triangle x >= 0, y >= 0, x + y <= 1 projected onto x gives [0, 1]
        let a = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let p = Polytope::new(a, v(&[0.0, 0.0, 1.0])).unwrap();
        let x = p.project_out(1).unwrap();
        assert!(x.approx_eq(&Polytope::from_box(&[0.0], &[1.0]).unwrap(), 1e-12).unwrap());
    }

    #[test]
    fn reduce_drops_redundant_rows() {
        let extra = Polytope::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]),
            v(&[5.0, 1.0]),
        )
        .unwrap();
        let p = unit().stack(&extra).unwrap().reduce();
        assert_eq!(p.nrows(), 4);
    }

    #[test]
    fn json_roundtrip() {
        let s = serde_json::to_string(&unit()).unwrap();
        assert!(s.starts_with("{\"A\":[[1.0,0.0]"));
        let back: Polytope = serde_json::from_str(&s).unwrap();
        assert_eq!(back, unit());
        let full: Polytope = serde_json::from_str(&serde_json::to_string(&Polytope::full(3)).unwrap()).unwrap();
        assert_eq!(full.dim(), 3);
    }
}
