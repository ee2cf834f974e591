//! Tube MPC controllers: the baseline tube MPC, the Parent and Child layers,
//! the deterministic Child, and the supervisor that stacks them.

pub mod controllers;
pub mod layer;
pub mod supervisor;
pub mod system;

pub use controllers::*;
pub use layer::{InitialCondition, LayerProblem, LayerSolution, StageConstraint};
pub use supervisor::*;
pub use system::{LipschitzSystem, Nonlinearity, INPUT_TOL};

use crate::polytope::{Polytope, PolytopeError};
use crate::qp::{QpError, QpSettings};
use crate::setcalc::{SetError, TubeDesign};
use crate::sqp::{SqpError, SqpSettings};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("{layer} problem is infeasible")]
    Infeasible { layer: &'static str },
    #[error("warm start violates the Child constraints by {0:e}")]
    WarmStartInfeasible(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("applied input leaves U by {0:e}")]
    InputOutsideU(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Sqp(#[from] SqpError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// Disturbance-free prediction model `z+ = A z + B v + g(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    #[serde(rename = "A", with = "crate::matser::mat")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::matser::mat")]
    pub b: DMatrix<f64>,
    #[serde(default = "zero_g")]
    pub g: Nonlinearity,
}

fn zero_g() -> Nonlinearity {
    Nonlinearity::Zero
}

impl Model {
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Model { a, b, g: Nonlinearity::Zero }
    }

    pub fn step(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * v + self.g.eval(z)
    }
}

impl LipschitzSystem {
    pub fn model(&self) -> Model {
        Model { a: self.a.clone(), b: self.b.clone(), g: self.g.clone() }
    }
}

/// One level of the controller stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub model: Model,
    pub horizon: usize,
    pub input_hold: usize,
    pub update_period: usize,
    #[serde(rename = "Q", with = "crate::matser::mat")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "crate::matser::mat")]
    pub r: DMatrix<f64>,
    #[serde(rename = "P_term", with = "crate::matser::mat")]
    pub p_term: DMatrix<f64>,
    #[serde(with = "crate::matser::vec")]
    pub target_offset: DVector<f64>,
    pub tube: TubeDesign,
    pub tightened_state: Polytope,
    pub tightened_input: Polytope,
    pub terminal_set: Option<Polytope>,
}

impl LayerConfig {
    pub fn n(&self) -> usize {
        self.model.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.model.b.ncols()
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |s: String| Err(MpcError::Config(s));
        let (n, m) = (self.n(), self.m());
        if self.model.a.ncols() != n || self.model.b.nrows() != n {
            return bad("model shapes".into());
        }
        if self.horizon == 0 || self.input_hold == 0 || self.horizon % self.input_hold != 0 {
            return bad(format!("horizon {} is not a positive multiple of input_hold {}", self.horizon, self.input_hold));
        }
        if self.update_period == 0 {
            return bad("update_period must be positive".into());
        }
        if self.q.shape() != (n, n) || self.p_term.shape() != (n, n) || self.r.shape() != (m, m) || self.target_offset.len() != n {
            return bad("cost shapes".into());
        }
        if self.tube.cross_section.dim() != n || self.tightened_state.dim() != n || self.tightened_input.dim() != m {
            return bad("set dimensions".into());
        }
        if self.terminal_set.as_ref().is_some_and(|t| t.dim() != n) {
            return bad("terminal set dimension".into());
        }
        Ok(())
    }

    /// Reduced-update-rate validity for a planner serving a lower level with
    /// horizon `lower`.
    pub fn check_update_rate(&self, lower: usize) -> Result<(), MpcError> {
        if lower >= self.horizon || self.update_period >= self.horizon - lower {
            return Err(MpcError::Config(format!(
                "update_period {} must be smaller than horizon {} minus lower horizon {}",
                self.update_period, self.horizon, lower
            )));
        }
        Ok(())
    }
}

/// Feedback correction that keeps the plant inside the Child tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ancillary {
    /// `u = v + K (x - z)`.
    Linear {
        #[serde(with = "crate::matser::mat")]
        gain: DMatrix<f64>,
    },
    /// `u = v + sin(z[from]) - sin(x[from]) + K (x - z)`, cancelling the
    /// sine entering through the single input.
    SineCancel {
        from: usize,
        #[serde(with = "crate::matser::mat")]
        gain: DMatrix<f64>,
    },
}

impl Ancillary {
    /// Unclipped ancillary input.
    pub fn raw(&self, v: &DVector<f64>, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Ancillary::Linear { gain } => v + gain * (x - z),
            Ancillary::SineCancel { from, gain } => {
                let mut u = v + gain * (x - z);
                u.add_scalar_mut(z[*from].sin() - x[*from].sin());
                u
            }
        }
    }

    /// Ancillary input clipped to the bounding box of `u_set`. The second
    /// value is the clipping distance, which a sound tube design keeps at 0.
    pub fn apply(&self, v: &DVector<f64>, z: &DVector<f64>, x: &DVector<f64>, u_set: &Polytope) -> Result<(DVector<f64>, f64), MpcError> {
        let raw = self.raw(v, z, x);
        let (lo, hi) = u_set.bounding_box()?;
        let u = DVector::from_fn(raw.len(), |i, _| raw[i].clamp(lo[i], hi[i]));
        let d = (&u - &raw).amax();
        Ok((u, d))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub qp: QpSettings,
    pub sqp: SqpSettings,
}

/// Violation bound for the Parent warm start in the Child problem.
pub const WARM_START_TOL: f64 = 1e-8;
