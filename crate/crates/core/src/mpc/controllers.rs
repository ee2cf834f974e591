//! Single-step controller operations: baseline tube MPC, Parent solve and
//! virtual rollout, robust and deterministic Child solves, and the phase,
//! re-initialisation and scheduling predicates.

use super::layer::{InitialCondition, LayerProblem, SolveStatus, StageConstraint};
use super::{Ancillary, LayerConfig, Model, MpcError, SolverSettings, WARM_START_TOL};
use crate::polytope::Polytope;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Nominal plan of a tracking layer (Child, baseline or secondary TMPC, or a
/// planner solved in child form).
#[derive(Debug, Clone, PartialEq)]
pub struct ChildState {
    pub z_traj: Vec<DVector<f64>>,
    /// Applied nominal inputs.
    pub v_traj: Vec<DVector<f64>>,
    /// Decision increments on top of the inherited inputs (zero-length for a
    /// baseline TMPC).
    pub dv_traj: Vec<DVector<f64>>,
    pub feasible: bool,
    pub cost: f64,
    /// Cost of the Parent warm start, when there is one.
    pub warm_cost: Option<f64>,
    /// Largest constraint violation of the Parent warm start.
    pub warm_violation: Option<f64>,
    pub optimal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentState {
    pub z_traj: Vec<DVector<f64>>,
    /// One input per base step, with input holds expanded.
    pub v_traj: Vec<DVector<f64>>,
    pub x_virtual_traj: Vec<DVector<f64>>,
    pub u_virtual_traj: Vec<DVector<f64>>,
    /// Steps since the plan was computed; the current plan index.
    pub age: usize,
    pub cost: f64,
}

impl ParentState {
    pub fn horizon(&self) -> usize {
        self.v_traj.len()
    }

    /// Planned state at the current time.
    pub fn current(&self) -> &DVector<f64> {
        &self.z_traj[self.age.min(self.horizon())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    ReuseShifted,
    Resolve,
}

fn zeros(m: usize, k: usize) -> Vec<DVector<f64>> {
    vec![DVector::zeros(m); k]
}

fn problem_base(cfg: &LayerConfig, model: &Model, horizon: usize, hold: usize, init: InitialCondition) -> LayerProblem {
    let m = model.b.ncols();
    LayerProblem {
        a: model.a.clone(),
        b: model.b.clone(),
        g: model.g.clone(),
        horizon,
        hold,
        q: cfg.q.clone(),
        r: cfg.r.clone(),
        p: cfg.p_term.clone(),
        target: cfg.target_offset.clone(),
        init,
        state_constraints: vec![],
        input_set: cfg.tightened_input.clone(),
        input_shift: zeros(m, horizon / hold),
        input_offset: zeros(m, horizon),
    }
}

/// Tube MPC problem: `x ∈ z_0 ⊕ E`, tightened states and inputs, terminal set.
pub fn tmpc_problem(cfg: &LayerConfig, x: &DVector<f64>) -> Result<LayerProblem, MpcError> {
    let terminal = cfg.terminal_set.clone().ok_or_else(|| MpcError::Config("tube MPC needs a terminal set".into()))?;
    let init = InitialCondition::Tube { x: x.clone(), set: cfg.tube.cross_section.clone() };
    let mut p = problem_base(cfg, &cfg.model, cfg.horizon, cfg.input_hold, init);
    let zero = DVector::zeros(cfg.n());
    for j in 1..=cfg.horizon {
        p.state_constraints.push(StageConstraint { stage: j, set: cfg.tightened_state.clone(), center: zero.clone() });
    }
    p.state_constraints.push(StageConstraint { stage: cfg.horizon, set: terminal, center: zero });
    Ok(p)
}

/// Shift a plan by one step, repeating the last input for the new tail.
fn shifted(p: &LayerProblem, plan: &ChildState) -> Option<DVector<f64>> {
    if plan.z_traj.len() != p.horizon + 1 || p.hold != 1 || plan.v_traj.is_empty() {
        return None;
    }
    let v_tail = plan.v_traj[plan.v_traj.len() - 1].clone();
    let mut mu: Vec<_> = plan.v_traj[1..].to_vec();
    mu.push(v_tail);
    Some(p.rollout(&plan.z_traj[1], &mu))
}

/// One baseline tube MPC step: solve the nominal problem from `x` and apply
/// the ancillary law. Returns the input, the plan and the clipping distance.
pub fn tmpc_step(
    cfg: &LayerConfig,
    ancillary: &Ancillary,
    u_set: &Polytope,
    x: &DVector<f64>,
    prev: Option<&ChildState>,
    settings: &SolverSettings,
    name: &'static str,
) -> Result<(DVector<f64>, ChildState, f64), MpcError> {
    cfg.validate()?;
    let p = tmpc_problem(cfg, x)?;
    let warm = prev.and_then(|s| shifted(&p, s));
    let sol = p.solve(warm.as_ref(), &settings.qp, &settings.sqp, name)?;
    let (u, clip) = ancillary.apply(&sol.v[0], &sol.z[0], x, u_set)?;
    let plan = ChildState {
        z_traj: sol.z,
        v_traj: sol.v,
        dv_traj: vec![],
        feasible: true,
        cost: sol.cost,
        warm_cost: None,
        warm_violation: None,
        optimal: sol.status == SolveStatus::Optimal,
    };
    Ok((u, plan, clip))
}

/// Parent problem: free `z_0` with `anchor ∈ z_0 ⊕ E^P`, tightened states,
/// held inputs and terminal set, cost around `target_offset`.
pub fn parent_problem(cfg: &LayerConfig, anchor: &DVector<f64>) -> Result<LayerProblem, MpcError> {
    let mut p = tmpc_problem(cfg, anchor)?;
    p.hold = cfg.input_hold;
    p.input_shift = zeros(cfg.m(), cfg.horizon / cfg.input_hold);
    Ok(p)
}

/// Solve the Parent problem and roll out the virtual closed loop of the
/// lower-level model `lower` from `anchor` under `u = v + K (x - z)`.
pub fn parent_solve(cfg: &LayerConfig, lower: &Model, anchor: &DVector<f64>, settings: &SolverSettings) -> Result<ParentState, MpcError> {
    cfg.validate()?;
    let p = parent_problem(cfg, anchor)?;
    let sol = p.solve(None, &settings.qp, &settings.sqp, "parent")?;
    Ok(parent_state(cfg, lower, anchor, sol.z, sol.v, sol.cost))
}

fn parent_state(cfg: &LayerConfig, lower: &Model, anchor: &DVector<f64>, z: Vec<DVector<f64>>, v: Vec<DVector<f64>>, cost: f64) -> ParentState {
    let mut s = ParentState { z_traj: z, v_traj: v, x_virtual_traj: vec![], u_virtual_traj: vec![], age: 0, cost };
    let (xs, us) = virtual_rollout(&s, cfg, lower, anchor, cfg.horizon);
    s.x_virtual_traj = xs;
    s.u_virtual_traj = us;
    s
}

/// Virtual trajectory `x^P` of `lower` started at `anchor` against the plan
/// from index `parent.age`, with `u^P = v^P + K^P (x^P - z^P)`. Returns
/// `len + 1` states and `len` inputs (fewer if the plan runs out).
pub fn virtual_rollout(parent: &ParentState, cfg: &LayerConfig, lower: &Model, anchor: &DVector<f64>, len: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let o = parent.age;
    let len = len.min(parent.horizon().saturating_sub(o));
    let k = &cfg.tube.gain;
    let mut xs = vec![anchor.clone()];
    let mut us = Vec::with_capacity(len);
    for i in 0..len {
        let u = &parent.v_traj[o + i] + k * (&xs[i] - &parent.z_traj[o + i]);
        xs.push(lower.step(&xs[i], &u));
        us.push(u);
    }
    (xs, us)
}

/// How the tracking layer relates to the plant.
#[derive(Debug, Clone, Copy)]
pub enum ChildMode<'a> {
    /// `x - z_0 ∈ set` and `v^P + Δv ∈ V^P`.
    Robust { tube: &'a Polytope },
    /// `z_0 = x` and `u^P + Δu ∈ U`.
    Deterministic { u_set: &'a Polytope },
}

/// Child problem against the plan of `upper` at index `upper_state.age`.
/// Returns the problem and the warm start built from the virtual rollout.
pub fn child_problem(
    cfg: &LayerConfig,
    upper: &LayerConfig,
    upper_state: &ParentState,
    x: &DVector<f64>,
    anchor: &DVector<f64>,
    mode: ChildMode,
) -> Result<(LayerProblem, DVector<f64>), MpcError> {
    let o = upper_state.age;
    let nc = cfg.horizon;
    if o + nc > upper_state.horizon() {
        return Err(MpcError::Config(format!("Parent plan exhausted: age {o} + horizon {nc} > {}", upper_state.horizon())));
    }
    let (xs, us) = virtual_rollout(upper_state, upper, &cfg.model, anchor, nc);
    let init = match mode {
        ChildMode::Robust { tube } => InitialCondition::Tube { x: x.clone(), set: tube.clone() },
        ChildMode::Deterministic { .. } => InitialCondition::Fixed(x.clone()),
    };
    let mut p = problem_base(cfg, &cfg.model, nc, 1, init);
    for j in 0..=nc {
        p.state_constraints.push(StageConstraint { stage: j, set: upper.tube.cross_section.clone(), center: upper_state.z_traj[o + j].clone() });
    }
    p.input_offset = us.clone();
    match mode {
        ChildMode::Robust { .. } => {
            p.input_set = upper.tightened_input.clone();
            p.input_shift = upper_state.v_traj[o..o + nc].to_vec();
        }
        ChildMode::Deterministic { u_set } => {
            p.input_set = u_set.clone();
            p.input_shift = us;
        }
    }
    let warm = p.pack(&xs, &zeros(cfg.m(), nc));
    Ok((p, warm))
}

/// Solve the Child problem warm-started from the Parent's virtual rollout.
/// Fails with `WarmStartInfeasible` when the warm start violates any Child
/// constraint by more than `WARM_START_TOL`.
#[allow(clippy::too_many_arguments)]
pub fn child_solve(
    cfg: &LayerConfig,
    upper: &LayerConfig,
    upper_state: &ParentState,
    x: &DVector<f64>,
    anchor: &DVector<f64>,
    mode: ChildMode,
    settings: &SolverSettings,
    name: &'static str,
) -> Result<ChildState, MpcError> {
    let (p, warm) = child_problem(cfg, upper, upper_state, x, anchor, mode)?;
    let asm = p.assemble();
    let warm_violation = p.violation(&asm, &warm);
    if warm_violation > WARM_START_TOL {
        return Err(MpcError::WarmStartInfeasible(warm_violation));
    }
    let warm_cost = p.cost(&asm, &warm);
    let sol = match p.solve(Some(&warm), &settings.qp, &settings.sqp, name) {
        Ok(s) if s.cost <= warm_cost && p.violation(&asm, &s.y) <= WARM_START_TOL.max(1e-9 * (1.0 + asm.b_in.amax())) => Some(s),
        Ok(_) | Err(MpcError::Infeasible { .. }) => None,
        Err(e) => return Err(e),
    };
    let (y, cost, optimal) = match sol {
        Some(s) => (s.y, s.cost, s.status == SolveStatus::Optimal),
        None => (warm, warm_cost, false),
    };
    let (z, mu, v) = p.unpack(&y);
    Ok(ChildState {
        z_traj: z,
        v_traj: v,
        dv_traj: mu,
        feasible: true,
        cost,
        warm_cost: Some(warm_cost),
        warm_violation: Some(warm_violation),
        optimal,
    })
}

/// Deterministic Child step: `z_0 = x` and the first planned input is
/// applied directly.
pub fn det_child_step(
    cfg: &LayerConfig,
    upper: &LayerConfig,
    upper_state: &ParentState,
    u_set: &Polytope,
    x: &DVector<f64>,
    anchor: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<(DVector<f64>, ChildState), MpcError> {
    let plan = child_solve(cfg, upper, upper_state, x, anchor, ChildMode::Deterministic { u_set }, settings, "deterministic child")?;
    Ok((plan.v_traj[0].clone(), plan))
}

/// Ancillary input of the Child at the current step, clipped to `U`.
pub fn ancillary_child_input(ancillary: &Ancillary, child: &ChildState, x: &DVector<f64>, u_set: &Polytope) -> Result<(DVector<f64>, f64), MpcError> {
    ancillary.apply(&child.v_traj[0], &child.z_traj[0], x, u_set)
}

/// True once the Child nominal state, relative to `center`, lies in `E^P`.
pub fn check_phase_switch(z: &DVector<f64>, ep: &Polytope, center: &DVector<f64>) -> bool {
    ep.contains(&(z - center), 1e-8)
}

/// True when `x` has left `admissible`, the region around the current Parent
/// state from which the Child can still be served (`E^P ⊕ E^C` translated
/// to `z^P_k`, or `Z^C_N ⊕ E^C`).
pub fn check_parent_reinit(x: &DVector<f64>, admissible: &Polytope) -> bool {
    !admissible.contains(x, 1e-9 * (1.0 + admissible.b().amax()))
}

/// Reuse the shifted plan until it is `update_period` steps old.
pub fn schedule_parent(age: usize, update_period: usize) -> Schedule {
    if age >= update_period {
        Schedule::Resolve
    } else {
        Schedule::ReuseShifted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setcalc::TubeDesign;
    use nalgebra::DMatrix;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn integrator_cfg(horizon: usize, tube: Polytope) -> LayerConfig {
        let a = DMatrix::identity(1, 1);
        let b = DMatrix::identity(1, 1);
        let gain = DMatrix::from_element(1, 1, -0.5);
        LayerConfig {
            model: Model::linear(a.clone(), b.clone()),
            horizon,
            input_hold: 1,
            update_period: 1,
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            p_term: DMatrix::identity(1, 1),
            target_offset: v(&[0.0]),
            tube: TubeDesign::new(&a, &b, gain, tube, Polytope::origin(1)),
            tightened_state: Polytope::symmetric_box(&[10.0]).unwrap(),
            tightened_input: Polytope::symmetric_box(&[1.0]).unwrap(),
            terminal_set: Some(Polytope::symmetric_box(&[1.0]).unwrap()),
        }
    }

    #[test]
    fn origin_gives_zero_input() {
        let cfg = integrator_cfg(5, Polytope::symmetric_box(&[0.5]).unwrap());
        let anc = Ancillary::Linear { gain: cfg.tube.gain.clone() };
        let u_set = Polytope::symmetric_box(&[2.0]).unwrap();
        let (u, plan, clip) = tmpc_step(&cfg, &anc, &u_set, &v(&[0.0]), None, &SolverSettings::default(), "tmpc").unwrap();
        assert!(u.amax() < 1e-12 && plan.cost.abs() < 1e-12 && clip == 0.0);
    }

    #[test]
    fn parent_at_target_costs_nothing() {
        let mut cfg = integrator_cfg(8, Polytope::symmetric_box(&[0.5]).unwrap());
        cfg.target_offset = v(&[3.0]);
        cfg.terminal_set = Some(Polytope::from_box(&[2.0], &[4.0]).unwrap());
        let s = parent_solve(&cfg, &cfg.model.clone(), &v(&[3.0]), &SolverSettings::default()).unwrap();
        assert!(s.cost.abs() < 1e-10);
        assert!(s.z_traj.iter().all(|z| (z[0] - 3.0).abs() < 1e-6));
    }

    #[test]
    fn held_parent_inputs() {
        let mut cfg = integrator_cfg(12, Polytope::symmetric_box(&[0.5]).unwrap());
        cfg.input_hold = 4;
        let p = parent_problem(&cfg, &v(&[5.0])).unwrap();
        assert_eq!(p.n_inputs(), 3);
        let s = parent_solve(&cfg, &cfg.model.clone(), &v(&[5.0]), &SolverSettings::default()).unwrap();
        assert_eq!(s.v_traj.len(), 12);
        assert_eq!(s.v_traj[4], s.v_traj[7]);
    }

    #[test]
    fn rollout_stays_in_parent_tube() {
        let cfg = integrator_cfg(10, Polytope::symmetric_box(&[0.5]).unwrap());
        let s = parent_solve(&cfg, &cfg.model.clone(), &v(&[6.0]), &SolverSettings::default()).unwrap();
        for (x, z) in s.x_virtual_traj.iter().zip(&s.z_traj) {
            assert!(cfg.tube.cross_section.contains(&(x - z), 1e-12));
        }
    }

    #[test]
    fn child_improves_on_warm_start() {
        let parent_cfg = integrator_cfg(10, Polytope::symmetric_box(&[0.5]).unwrap());
        let child_cfg = integrator_cfg(4, Polytope::symmetric_box(&[0.1]).unwrap());
        let x = v(&[6.0]);
        let ps = parent_solve(&parent_cfg, &child_cfg.model, &x, &SolverSettings::default()).unwrap();
        let tube = child_cfg.tube.cross_section.clone();
        let c = child_solve(&child_cfg, &parent_cfg, &ps, &x, &x, ChildMode::Robust { tube: &tube }, &SolverSettings::default(), "child").unwrap();
        assert!(c.warm_violation.unwrap() <= WARM_START_TOL);
        assert!(c.cost <= c.warm_cost.unwrap() + 1e-12);
    }

    #[test]
    fn predicates() {
        let ep = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        assert!(check_phase_switch(&v(&[0.0, 0.0]), &ep, &v(&[0.0, 0.0])));
        assert!(!check_phase_switch(&v(&[50.0, 0.0]), &ep, &v(&[0.0, 0.0])));
        assert!(!check_parent_reinit(&v(&[0.0, 0.0]), &ep));
        assert!(check_parent_reinit(&v(&[1e6, 0.0]), &ep));
        assert_eq!(schedule_parent(5, 6), Schedule::ReuseShifted);
        assert_eq!(schedule_parent(6, 6), Schedule::Resolve);
        assert_eq!(schedule_parent(1, 1), Schedule::Resolve);
    }
}
