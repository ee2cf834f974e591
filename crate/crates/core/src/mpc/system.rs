//! Plant and nominal models of the form `x+ = A x + B u + g(x) + w`.

use crate::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The nonlinear term `g`, with `g(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `g(x)[to] = sin(x[from]) - slope * x[from]`, all other entries zero.
    Sine { from: usize, to: usize, slope: f64 },
}

impl Nonlinearity {
    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        if let Nonlinearity::Sine { from, to, slope } = *self {
            g[to] = x[from].sin() - slope * x[from];
        }
        g
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        if let Nonlinearity::Sine { from, to, slope } = *self {
            j[(to, from)] = x[from].cos() - slope;
        }
        j
    }

    /// A valid Lipschitz constant in the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Sine { slope, .. } => 1.0 + slope.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSystem {
    #[serde(rename = "A", with = "crate::matser::mat")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::matser::mat")]
    pub b: DMatrix<f64>,
    pub g: Nonlinearity,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "W")]
    pub w: Polytope,
    #[serde(rename = "X")]
    pub x: Polytope,
    #[serde(rename = "U")]
    pub u: Polytope,
}

/// Tolerance used when asserting that an applied input lies in `U`.
pub const INPUT_TOL: f64 = 1e-7;

impl LipschitzSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Disturbance-free model `A z + B v + g(z)`.
    pub fn nominal_step(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * v + self.g.eval(z)
    }

    /// Plant update `A x + g(x) + B u + w`; fails when `u` is outside `U`.
    pub fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, f64> {
        let viol = self.u.violation(u);
        if viol > INPUT_TOL {
            return Err(viol);
        }
        Ok(self.nominal_step(x, u) + w)
    }

    /// Largest observed ratio `|g(x1)-g(x2)| / |x1-x2|` over random pairs in a box.
    pub fn lipschitz_spot_check(&self, half_width: f64, pairs: usize, rng: &mut impl Rng) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let x1 = DVector::from_fn(n, |_, _| rng.gen_range(-half_width..=half_width));
            let x2 = DVector::from_fn(n, |_, _| rng.gen_range(-half_width..=half_width));
            let d = (&x1 - &x2).norm();
            if d > 1e-12 {
                worst = worst.max((self.g.eval(&x1) - self.g.eval(&x2)).norm() / d);
            }
        }
        worst
    }
}
