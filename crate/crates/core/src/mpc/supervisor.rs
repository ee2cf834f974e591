//! Closed-loop controller objects: the baseline tube MPC and the supervisor
//! that runs a stack of planners above a Child, then hands over to a short
//! horizon tube MPC.

use super::controllers::*;
use super::{Ancillary, LayerConfig, MpcError, SolverSettings};
use crate::polytope::Polytope;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Robust,
    Deterministic,
}

/// Everything a controller reports for one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub u: DVector<f64>,
    pub phase: Phase,
    pub z_child: DVector<f64>,
    /// Current state of the lowest planner, if one is active.
    pub z_parent: Option<DVector<f64>>,
    pub t_child_us: f64,
    /// Zero when every planner reused its shifted plan.
    pub t_parent_us: f64,
    pub parent_solved: bool,
    pub reinit: bool,
    /// Parent warm start violation in the Child problem.
    pub warm_violation: Option<f64>,
    /// Largest violation of `z^C_j ∈ z^P_j ⊕ E^P` over the Child plan.
    pub tube_margin: Option<f64>,
    /// `z^C_k - target ∈ E^P` for the lowest planner.
    pub in_parent_tube: bool,
    pub switched: bool,
    /// Distance by which the ancillary input was clipped into `U`.
    pub clip: f64,
    pub child_cost: f64,
    pub warm_cost: Option<f64>,
}

pub trait Controller {
    fn step(&mut self, x: &DVector<f64>) -> Result<StepOutput, MpcError>;
    fn reset(&mut self);
}

fn micros(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

#[derive(Debug, Clone)]
pub struct TubeMpc {
    pub cfg: LayerConfig,
    pub ancillary: Ancillary,
    pub u_set: Polytope,
    pub settings: SolverSettings,
    prev: Option<ChildState>,
}

impl TubeMpc {
    pub fn new(cfg: LayerConfig, ancillary: Ancillary, u_set: Polytope, settings: SolverSettings) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(TubeMpc { cfg, ancillary, u_set, settings, prev: None })
    }

    pub fn plan(&self) -> Option<&ChildState> {
        self.prev.as_ref()
    }
}

impl Controller for TubeMpc {
    fn step(&mut self, x: &DVector<f64>) -> Result<StepOutput, MpcError> {
        let t0 = Instant::now();
        let (u, plan, clip) = tmpc_step(&self.cfg, &self.ancillary, &self.u_set, x, self.prev.as_ref(), &self.settings, "tmpc")?;
        let t = micros(t0);
        let out = StepOutput {
            u,
            phase: Phase::Primary,
            z_child: plan.z_traj[0].clone(),
            z_parent: None,
            t_child_us: t,
            t_parent_us: 0.0,
            parent_solved: false,
            reinit: false,
            warm_violation: None,
            tube_margin: None,
            in_parent_tube: false,
            switched: false,
            clip,
            child_cost: plan.cost,
            warm_cost: None,
        };
        self.prev = Some(plan);
        Ok(out)
    }

    fn reset(&mut self) {
        self.prev = None;
    }
}

/// Planner stack (top first) above a Child, with a secondary tube MPC.
#[derive(Debug, Clone)]
pub struct Supervisor {
    pub levels: Vec<LayerConfig>,
    pub child: LayerConfig,
    pub ancillary: Ancillary,
    pub secondary: TubeMpc,
    pub u_set: Polytope,
    pub variant: Variant,
    pub settings: SolverSettings,
    /// `E^P ⊕ E^C` of the lowest planner.
    reinit_region: Polytope,
    states: Vec<Option<ParentState>>,
    top: usize,
    promoted: bool,
    child_prev: Option<ChildState>,
    phase: Phase,
}

/// Build a supervisor from planner configurations (top first), validating
/// update rates and that `X ⊖ (E^C ⊕ E^1 ⊕ ...)` is nonempty.
#[allow(clippy::too_many_arguments)]
pub fn stack_layers(
    levels: Vec<LayerConfig>,
    child: LayerConfig,
    ancillary: Ancillary,
    secondary: TubeMpc,
    x_set: &Polytope,
    u_set: Polytope,
    variant: Variant,
    settings: SolverSettings,
) -> Result<Supervisor, MpcError> {
    if levels.is_empty() {
        return Err(MpcError::Config("at least one planner level is required".into()));
    }
    child.validate()?;
    let mut sum = child.tube.cross_section.clone();
    for (i, l) in levels.iter().enumerate() {
        l.validate()?;
        let lower = levels.get(i + 1).map_or(child.horizon, |n| n.horizon);
        l.check_update_rate(lower)?;
        if l.terminal_set.is_none() {
            return Err(MpcError::Config(format!("planner level {i} has no terminal set")));
        }
        sum = sum.minkowski_sum(&l.tube.cross_section)?.reduce();
    }
    if x_set.pontryagin_diff(&sum)?.is_empty() {
        return Err(MpcError::Config("the Minkowski sum of the tubes does not fit in X".into()));
    }
    let bottom = levels.last().expect("nonempty");
    let reinit_region = bottom.tube.cross_section.minkowski_sum(&child.tube.cross_section)?.reduce();
    let n = levels.len();
    Ok(Supervisor {
        levels,
        child,
        ancillary,
        secondary,
        u_set,
        variant,
        settings,
        reinit_region,
        states: vec![None; n],
        top: 0,
        promoted: false,
        child_prev: None,
        phase: Phase::Primary,
    })
}

impl Supervisor {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Index of the highest planner still active.
    pub fn top(&self) -> usize {
        self.top
    }

    pub fn parent_state(&self, level: usize) -> Option<&ParentState> {
        self.states.get(level).and_then(|s| s.as_ref())
    }

    pub fn child_plan(&self) -> Option<&ChildState> {
        self.child_prev.as_ref()
    }

    /// Current planned state of the level below `i` (the Child prediction
    /// `z^C_{k|k-1}` for the lowest planner).
    fn prediction_below(&self, i: usize) -> Option<DVector<f64>> {
        if i + 1 < self.levels.len() {
            self.states[i + 1].as_ref().map(|s| s.current().clone())
        } else {
            self.child_prev.as_ref().map(|c| c.z_traj[1].clone())
        }
    }

    fn solve_level(&self, i: usize, x: &DVector<f64>) -> Result<ParentState, MpcError> {
        let cfg = &self.levels[i];
        let lower = self.levels.get(i + 1).map_or(&self.child.model, |l| &l.model);
        let anchor = self.prediction_below(i).unwrap_or_else(|| x.clone());
        if i == self.top {
            return parent_solve(cfg, lower, &anchor, &self.settings);
        }
        // Middle planner: tracks the level above like a Child would.
        let upper = &self.levels[i - 1];
        let upper_state = self.states[i - 1].as_ref().expect("upper level solved first");
        let own = self.states[i].as_ref().map_or_else(|| anchor.clone(), |s| s.current().clone());
        let tube = cfg.tube.cross_section.clone();
        let plan = child_solve(cfg, upper, upper_state, &anchor, &own, ChildMode::Robust { tube: &tube }, &self.settings, "planner")?;
        let mut s = ParentState { z_traj: plan.z_traj, v_traj: plan.v_traj, x_virtual_traj: vec![], u_virtual_traj: vec![], age: 0, cost: plan.cost };
        let (xs, us) = virtual_rollout(&s, cfg, lower, &anchor, cfg.horizon);
        s.x_virtual_traj = xs;
        s.u_virtual_traj = us;
        Ok(s)
    }

    fn primary_step(&mut self, x: &DVector<f64>, force_reinit: bool) -> Result<StepOutput, MpcError> {
        let bottom = self.levels.len() - 1;
        let reinit = force_reinit
            || self.states[bottom].as_ref().is_some_and(|s| {
                let region = self.reinit_region.translate(s.current()).expect("dimensions checked");
                check_parent_reinit(x, &region)
            });
        if reinit {
            self.child_prev = None;
            for s in self.states.iter_mut().skip(self.top) {
                *s = None;
            }
        }

        let mut t_parent = 0.0;
        let mut parent_solved = false;
        for i in self.top..self.levels.len() {
            let resolve = match &self.states[i] {
                None => true,
                Some(s) => schedule_parent(s.age, self.levels[i].update_period) == Schedule::Resolve || (self.promoted && i == self.top),
            };
            if resolve {
                let t0 = Instant::now();
                let s = self.solve_level(i, x);
                t_parent += micros(t0);
                match s {
                    Ok(s) => self.states[i] = Some(s),
                    Err(MpcError::Infeasible { .. }) if !reinit => return self.primary_step(x, true),
                    Err(e) => return Err(e),
                }
                parent_solved = true;
            }
        }
        self.promoted = false;

        let planner = &self.levels[bottom];
        let ps = self.states[bottom].as_ref().expect("solved above");
        let anchor = self.child_prev.as_ref().map_or_else(|| x.clone(), |c| c.z_traj[1].clone());
        let t0 = Instant::now();
        let solved = match self.variant {
            Variant::Robust => {
                let tube = &self.child.tube.cross_section;
                child_solve(&self.child, planner, ps, x, &anchor, ChildMode::Robust { tube }, &self.settings, "child").and_then(|plan| {
                    let (u, clip) = ancillary_child_input(&self.ancillary, &plan, x, &self.u_set)?;
                    Ok((u, clip, plan))
                })
            }
            Variant::Deterministic => {
                det_child_step(&self.child, planner, ps, &self.u_set, x, &anchor, &self.settings).map(|(u, plan)| (u, 0.0, plan))
            }
        };
        let t_child = micros(t0);
        let (u, clip, plan) = match solved {
            Ok(r) => r,
            Err(MpcError::Infeasible { .. }) if !reinit => return self.primary_step(x, true),
            Err(e) => return Err(e),
        };

        let ep = &planner.tube.cross_section;
        let tube_margin = plan
            .z_traj
            .iter()
            .enumerate()
            .map(|(j, z)| ep.violation(&(z - &ps.z_traj[ps.age + j])))
            .fold(f64::NEG_INFINITY, f64::max);
        let z_parent = ps.current().clone();
        let in_parent_tube = check_phase_switch(&plan.z_traj[0], ep, &planner.target_offset);

        let mut switched = false;
        if self.top == bottom {
            if in_parent_tube {
                self.phase = Phase::Secondary;
                switched = true;
            }
        } else {
            let below = self.states[self.top + 1].as_ref().expect("solved above").current();
            let top = &self.levels[self.top];
            if check_phase_switch(below, &top.tube.cross_section, &top.target_offset) {
                self.states[self.top] = None;
                self.top += 1;
                self.promoted = true;
            }
        }

        let out = StepOutput {
            u,
            phase: Phase::Primary,
            z_child: plan.z_traj[0].clone(),
            z_parent: Some(z_parent),
            t_child_us: t_child,
            t_parent_us: t_parent,
            parent_solved,
            reinit,
            warm_violation: plan.warm_violation,
            tube_margin: Some(tube_margin),
            in_parent_tube,
            switched,
            clip,
            child_cost: plan.cost,
            warm_cost: plan.warm_cost,
        };
        for s in self.states.iter_mut().flatten() {
            s.age += 1;
        }
        self.child_prev = Some(plan);
        Ok(out)
    }
}

impl Controller for Supervisor {
    fn step(&mut self, x: &DVector<f64>) -> Result<StepOutput, MpcError> {
        match self.phase {
            Phase::Primary => self.primary_step(x, false),
            Phase::Secondary => self.secondary.step(x).map(|o| StepOutput { phase: Phase::Secondary, ..o }),
        }
    }

    fn reset(&mut self) {
        self.states.iter_mut().for_each(|s| *s = None);
        self.top = 0;
        self.promoted = false;
        self.child_prev = None;
        self.phase = Phase::Primary;
        self.secondary.reset();
    }
}
