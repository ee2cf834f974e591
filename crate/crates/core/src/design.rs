//! Offline design of the two case studies: gains, tubes, tightened sets,
//! terminal sets and the certificates that make the controllers sound.
//! The result is a serializable [`DesignBundle`].

use crate::mpc::{
    parent_problem, stack_layers, tmpc_problem, Ancillary, Controller, LayerConfig, LipschitzSystem, Model, MpcError, Nonlinearity, SolverSettings, Supervisor, TubeMpc, Variant,
};
use crate::polytope::{Polytope, PolytopeError};
use crate::qp::QpProblem;
use crate::setcalc::{self, SetError, TubeDesign};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Name of the certificate `E^P ⊆ Z^C_{N^C}`.
pub const EP_SUBSET_CONTROLLABLE: &str = "EP_subset_controllable";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("certificate {name} failed: {detail}")]
    Certificate { name: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    Case1,
    Case2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Tmpc,
    Pc,
    Det,
    TmpcExt,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Tmpc => "tmpc",
            ControllerKind::Pc => "pc",
            ControllerKind::Det => "det",
            ControllerKind::TmpcExt => "tmpc_ext",
        }
    }
}

/// Overrides of the preset design parameters. Unset fields keep the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignOptions {
    pub parent_horizon: Option<usize>,
    pub child_horizon: Option<usize>,
    pub input_hold: Option<usize>,
    pub update_period: Option<usize>,
    pub baseline_horizon: Option<usize>,
    pub ext_horizon: Option<usize>,
    pub secondary_horizon: Option<usize>,
    /// Scale of the region `E^P` is carved from (case 1, default 0.95).
    pub ep_region_scale: Option<f64>,
    /// Horizon of the controllable set `E^P` is carved from (case 1,
    /// default the Child horizon). Larger values break `E^P ⊆ Z^C_{N^C}`.
    pub ep_region_horizon: Option<usize>,
    /// Symmetric input bound `|u| <= u_max`.
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Certificate {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Certificate { name: name.into(), value, threshold, passed: value <= threshold }
    }

    fn holds(name: &str, ok: bool) -> Self {
        Certificate { name: name.into(), value: if ok { 0.0 } else { 1.0 }, threshold: 0.0, passed: ok }
    }
}

/// Design quantities reported for inspection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub tube_gain: Vec<f64>,
    pub tube_terms: usize,
    pub tube_alpha: f64,
    pub tightened_state_lower: Vec<f64>,
    pub tightened_input_bound: f64,
    pub parent_gain: Vec<f64>,
    pub parent_tube_bound: Vec<f64>,
    pub parent_input_bound: f64,
    pub parent_tube_terms: usize,
    /// Parent linearisation slope and remainder bound (case 2).
    pub slope: Option<f64>,
    pub remainder_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignBundle {
    pub schema: u32,
    pub case: CaseId,
    pub system: LipschitzSystem,
    #[serde(with = "crate::matser::vec")]
    pub x0: DVector<f64>,
    /// Weights of the closed-loop performance cost.
    #[serde(rename = "Q_eval", with = "crate::matser::mat")]
    pub q_eval: DMatrix<f64>,
    #[serde(rename = "R_eval", with = "crate::matser::mat")]
    pub r_eval: DMatrix<f64>,
    /// Baseline tube MPC; also the template for the extended and secondary
    /// horizons.
    pub tmpc: LayerConfig,
    pub ext_horizon: usize,
    pub secondary_horizon: usize,
    /// Planner stack, top first.
    pub parents: Vec<LayerConfig>,
    pub child: LayerConfig,
    pub ancillary: Ancillary,
    /// `Z^C_{N^C}` when it is computed (case 1).
    pub child_feasible_set: Option<Polytope>,
    pub settings: SolverSettings,
    pub summary: DesignSummary,
    pub certificates: Vec<Certificate>,
    /// Disturbance-free design for the deterministic Child.
    pub det: Option<Box<DesignBundle>>,
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn m(r: usize, c: usize, x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, x)
}

/// `{e : |K e| <= c}` for a single-row gain.
fn gain_slab(k: &DMatrix<f64>, c: f64) -> Result<Polytope, DesignError> {
    let a = nalgebra::stack![k; -k];
    Ok(Polytope::new(a, v(&[c, c]))?)
}

/// `U ⊖ K E` via the image of `E` under `K`.
fn tighten_input(u: &Polytope, k: &DMatrix<f64>, e: &Polytope) -> Result<Polytope, DesignError> {
    Ok(u.pontryagin_diff(&e.affine_map(k)?)?)
}

fn half_width(p: &Polytope) -> Result<f64, DesignError> {
    let (lo, hi) = p.bounding_box()?;
    Ok(hi.amax().min(lo.amax()))
}

/// Parent terminal set: maximal positive invariant set of `Acl^P` in
/// `(X^P - t) ∩ {K^P ζ ∈ V^P}`, translated back by `t`.
fn parent_terminal(acl: &DMatrix<f64>, k: &DMatrix<f64>, xp: &Polytope, vp: &Polytope, t: &DVector<f64>) -> Result<Polytope, DesignError> {
    let omega = xp.translate(&-t)?.intersect(&vp.preimage(k)?)?;
    let r = setcalc::max_positive_invariant(acl, &omega, 200)?;
    if !r.converged || r.set.is_empty() {
        return Err(DesignError::Invalid("Parent terminal set recursion failed".into()));
    }
    Ok(r.set.translate(t)?)
}

fn parent_cost(acl: &DMatrix<f64>, k: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, DesignError> {
    Ok(setcalc::solve_dlyap(acl, &(q + k.transpose() * r * k))?)
}

struct Case1Core {
    sys: LipschitzSystem,
    k: DMatrix<f64>,
    e: setcalc::RpiSet,
    xt: Polytope,
    vset: Polytope,
    zf: Polytope,
    p_child: DMatrix<f64>,
}

fn case1_system(w: f64, u_max: f64) -> Result<LipschitzSystem, DesignError> {
    let wset = if w > 0.0 { Polytope::symmetric_box(&[w, w])? } else { Polytope::origin(2) };
    Ok(LipschitzSystem {
        a: m(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        b: m(2, 1, &[0.0, 1.0]),
        g: Nonlinearity::Zero,
        lipschitz: 0.0,
        w: wset,
        x: Polytope::from_box(&[-50.0, -10000.0], &[10000.0, 10000.0])?,
        u: Polytope::symmetric_box(&[u_max])?,
    })
}

fn case1_core(sys: LipschitzSystem) -> Result<Case1Core, DesignError> {
    let (a, b) = (&sys.a, &sys.b);
    let i2 = DMatrix::identity(2, 2);
    let k = setcalc::solve_dare(a, b, &i2, &m(1, 1, &[10.0]))?.k;
    let acl = a + b * &k;
    let e = setcalc::rpi_outer(&acl, &sys.w, 0.02, 1e-9)?;
    let xt = sys.x.pontryagin_diff(&e.set)?;
    let vset = tighten_input(&sys.u, &k, &e.set)?;
    let ci = setcalc::max_control_invariant(a, b, &setcalc::symmetric_inner_box(&xt)?, &vset, 200)?;
    if !ci.converged || ci.set.is_empty() {
        return Err(DesignError::Invalid("terminal set recursion failed".into()));
    }
    let p_child = setcalc::solve_dare(a, b, &i2, &m(1, 1, &[1.0]))?.p;
    Ok(Case1Core { sys, k, e, xt, vset, zf: ci.set, p_child })
}

/// Case 1: double integrator driven from `[2700, 0]` to a wall at -50.
pub fn design_case1(opts: &DesignOptions) -> Result<DesignBundle, DesignError> {
    let mut bundle = case1_bundle(opts, 1.0)?;
    bundle.det = Some(Box::new(case1_bundle(opts, 0.0)?));
    Ok(bundle)
}

fn case1_bundle(opts: &DesignOptions, w: f64) -> Result<DesignBundle, DesignError> {
    let core = case1_core(case1_system(w, opts.u_max.unwrap_or(5.0))?)?;
    let Case1Core { sys, k, e, xt, vset, zf, p_child } = core;
    let (a, b) = (sys.a.clone(), sys.b.clone());
    let model = sys.model();
    let i2 = DMatrix::identity(2, 2);
    let r1 = m(1, 1, &[1.0]);
    let nc = opts.child_horizon.unwrap_or(10);
    let np = opts.parent_horizon.unwrap_or(120);
    let hold = opts.input_hold.unwrap_or(4);
    let period = opts.update_period.unwrap_or(6);
    let lam = opts.ep_region_scale.unwrap_or(0.95);
    let vmax = half_width(&vset)?;
    let vp_bound = 2.0;
    if vmax <= vp_bound {
        return Err(DesignError::Invalid(format!("tightened input bound {vmax} leaves no room for the Parent bound {vp_bound}")));
    }
    let t = v(&[40.0, 0.0]);

    let tube = TubeDesign::new(&a, &b, k.clone(), e.set.clone(), sys.w.clone());
    let tmpc = LayerConfig {
        model: model.clone(),
        horizon: opts.baseline_horizon.unwrap_or(60),
        input_hold: 1,
        update_period: 1,
        q: i2.clone(),
        r: r1.clone(),
        p_term: p_child.clone(),
        target_offset: DVector::zeros(2),
        tube: tube.clone(),
        tightened_state: xt.clone(),
        tightened_input: vset.clone(),
        terminal_set: Some(zf.clone()),
    };
    let child = LayerConfig { horizon: nc, terminal_set: None, ..tmpc.clone() };

    let cn = setcalc::controllable_set_n(&a, &b, None, &xt, &vset, &zf, nc)?;
    if cn.emptied {
        return Err(DesignError::Invalid("Child controllable set became empty".into()));
    }
    let zc = cn.last().clone();
    let region_set = match opts.ep_region_horizon {
        Some(h) if h != nc => setcalc::controllable_set_n(&a, &b, None, &xt, &vset, &zf, h)?.last().clone(),
        _ => zc.clone(),
    };

    let kp = m(1, 2, &[-0.0057, -0.11]);
    let aclp = &a + &b * &kp;
    let region = region_set.translate(&-&t)?.scale(lam).intersect(&gain_slab(&kp, vmax - vp_bound)?)?;
    let ep = setcalc::max_positive_invariant(&aclp, &region, 500)?;
    if !ep.converged || ep.set.is_empty() {
        return Err(DesignError::Invalid("Parent tube recursion failed".into()));
    }
    let ep_set = ep.set;
    let xp = xt.pontryagin_diff(&ep_set)?;
    let vp = Polytope::symmetric_box(&[vp_bound])?;
    let zfp = parent_terminal(&aclp, &kp, &xp, &vp, &t)?;
    let parent = LayerConfig {
        model: model.clone(),
        horizon: np,
        input_hold: hold,
        update_period: period,
        q: i2.clone(),
        r: r1.clone(),
        p_term: parent_cost(&aclp, &kp, &i2, &r1)?,
        target_offset: t.clone(),
        tube: TubeDesign::new(&a, &b, kp.clone(), ep_set.clone(), Polytope::origin(2)),
        tightened_state: xp,
        tightened_input: vp,
        terminal_set: Some(zfp),
    };

    let summary = DesignSummary {
        tube_gain: k.iter().copied().collect(),
        tube_terms: e.terms,
        tube_alpha: e.alpha,
        tightened_state_lower: xt.bounding_box()?.0.iter().copied().collect(),
        tightened_input_bound: vmax,
        parent_gain: kp.iter().copied().collect(),
        parent_tube_bound: ep_set.bounding_box()?.1.iter().copied().collect(),
        parent_input_bound: vp_bound,
        parent_tube_terms: ep.iterations,
        slope: None,
        remainder_bound: None,
    };
    let mut bundle = DesignBundle {
        schema: SCHEMA_VERSION,
        case: CaseId::Case1,
        x0: v(&[2700.0, 0.0]),
        q_eval: i2,
        r_eval: r1,
        tmpc,
        ext_horizon: opts.ext_horizon.unwrap_or(60),
        secondary_horizon: opts.secondary_horizon.unwrap_or(10),
        parents: vec![parent],
        child,
        ancillary: Ancillary::Linear { gain: k },
        child_feasible_set: Some(zc),
        settings: SolverSettings::default(),
        summary,
        certificates: vec![],
        det: None,
        system: sys,
    };
    bundle.certificates = bundle.certify()?;
    Ok(bundle)
}

/// Case 2: `x1+ = x2`, `x2+ = sin(x1) + u`, started at `[4π/3, 4π/3]`.
pub fn design_case2(opts: &DesignOptions) -> Result<DesignBundle, DesignError> {
    let u_max = opts.u_max.unwrap_or(0.3);
    let domain = 4.0 * PI / 3.0;
    let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = m(2, 1, &[0.0, 1.0]);
    let g = Nonlinearity::Sine { from: 0, to: 1, slope: 0.0 };
    let sys = LipschitzSystem {
        a: a.clone(),
        b: b.clone(),
        lipschitz: g.lipschitz(),
        g,
        w: Polytope::symmetric_box(&[0.1, 0.1])?,
        x: Polytope::symmetric_box(&[10.0, 10.0])?,
        u: Polytope::symmetric_box(&[u_max])?,
    };
    let i2 = DMatrix::identity(2, 2);
    let r1 = m(1, 1, &[1.0]);

    // Child tube under the sine-cancelling law: e+ = A e + w exactly.
    let k_e = DMatrix::zeros(1, 2);
    let ec = setcalc::rpi_outer(&a, &sys.w, 0.01, 1e-9)?;
    let correction = ec.set.affine_map(&m(1, 2, &[sys.lipschitz, 0.0]))?;
    let vc = sys.u.pontryagin_diff(&correction)?;
    if vc.is_empty() {
        return Err(DesignError::Invalid("input bound too small for the Child tube".into()));
    }
    let xt = sys.x.pontryagin_diff(&ec.set)?;
    let zf = Polytope::symmetric_box(&[0.1, 0.1])?;
    let a_lin = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let p_child = setcalc::solve_dare(&a_lin, &b, &i2, &r1)?.p;
    let model = sys.model();
    let tube = TubeDesign::new(&a, &b, k_e.clone(), ec.set.clone(), sys.w.clone());
    let tmpc = LayerConfig {
        model: model.clone(),
        horizon: opts.baseline_horizon.unwrap_or(10),
        input_hold: 1,
        update_period: 1,
        q: i2.clone(),
        r: r1.clone(),
        p_term: p_child,
        target_offset: DVector::zeros(2),
        tube,
        tightened_state: xt,
        tightened_input: vc.clone(),
        terminal_set: Some(zf),
    };
    let nc = opts.child_horizon.unwrap_or(10);
    let child = LayerConfig { horizon: nc, terminal_set: None, ..tmpc.clone() };

    // Parent: linear model with slope a, remainder treated as disturbance.
    let (slope, bound) = setcalc::minimax_slope(f64::sin, domain);
    let ap = m(2, 2, &[0.0, 1.0, slope, 0.0]);
    let kp = setcalc::solve_dare(&ap, &b, &i2, &m(1, 1, &[20.0]))?.k;
    let aclp = &ap + &b * &kp;
    let wp = Polytope::from_box(&[0.0, -bound], &[0.0, bound])?;
    let ep = setcalc::rpi_outer(&aclp, &wp, 0.01, 1e-9)?;
    let vp = tighten_input(&vc, &kp, &ep.set)?;
    if vp.is_empty() {
        return Err(DesignError::Invalid("Parent input set is empty".into()));
    }
    let d = Polytope::symmetric_box(&[domain, domain])?;
    let xp = d.pontryagin_diff(&ep.set)?;
    let zero = DVector::zeros(2);
    let zfp = parent_terminal(&aclp, &kp, &xp, &vp, &zero)?;
    let parent = LayerConfig {
        model: Model::linear(ap, b.clone()),
        horizon: opts.parent_horizon.unwrap_or(12),
        input_hold: opts.input_hold.unwrap_or(1),
        update_period: opts.update_period.unwrap_or(1),
        q: i2.clone(),
        r: r1.clone(),
        p_term: parent_cost(&aclp, &kp, &i2, &r1)?,
        target_offset: zero,
        tube: TubeDesign::new(&m(2, 2, &[0.0, 1.0, slope, 0.0]), &b, kp.clone(), ep.set.clone(), wp),
        tightened_state: xp,
        tightened_input: vp.clone(),
        terminal_set: Some(zfp),
    };
    let summary = DesignSummary {
        tube_gain: k_e.iter().copied().collect(),
        tube_terms: ec.terms,
        tube_alpha: ec.alpha,
        tightened_state_lower: tmpc.tightened_state.bounding_box()?.0.iter().copied().collect(),
        tightened_input_bound: half_width(&vc)?,
        parent_gain: kp.iter().copied().collect(),
        parent_tube_bound: ep.set.bounding_box()?.1.iter().copied().collect(),
        parent_input_bound: half_width(&vp)?,
        parent_tube_terms: ep.terms,
        slope: Some(slope),
        remainder_bound: Some(bound),
    };
    let mut bundle = DesignBundle {
        schema: SCHEMA_VERSION,
        case: CaseId::Case2,
        x0: v(&[domain, domain]),
        q_eval: i2,
        r_eval: r1,
        tmpc,
        ext_horizon: opts.ext_horizon.unwrap_or(20),
        secondary_horizon: opts.secondary_horizon.unwrap_or(20),
        parents: vec![parent],
        child,
        ancillary: Ancillary::SineCancel { from: 0, gain: k_e },
        child_feasible_set: None,
        settings: SolverSettings::default(),
        summary,
        certificates: vec![],
        det: None,
        system: sys,
    };
    bundle.certificates = bundle.certify()?;
    Ok(bundle)
}

pub fn design(case: CaseId, opts: &DesignOptions) -> Result<DesignBundle, DesignError> {
    match case {
        CaseId::Case1 => design_case1(opts),
        CaseId::Case2 => design_case2(opts),
    }
}

/// Tolerance of the RPI certificates `Acl E ⊕ W ⊆ E`.
pub const RPI_TOL: f64 = 1e-7;
/// Tolerance of the Riccati and Lyapunov residual certificates.
pub const RESIDUAL_TOL: f64 = 1e-10;

impl DesignBundle {
    /// Recompute every certificate from the stored design.
    pub fn certify(&self) -> Result<Vec<Certificate>, DesignError> {
        let mut out = Vec::new();
        let child_tube = &self.child.tube;
        out.push(Certificate::at_most("child_tube_rpi", child_tube.certify(f64::INFINITY)?, RPI_TOL));
        let scale = |p: &DMatrix<f64>| 1.0 + p.norm();
        if self.system.g.is_zero() {
            let lqr_res = setcalc::dare_residual(&self.system.a, &self.system.b, &self.tmpc.q, &self.tmpc.r, &self.tmpc.p_term);
            out.push(Certificate::at_most("terminal_cost_dare_residual", lqr_res / scale(&self.tmpc.p_term), RESIDUAL_TOL));
            let zf = self.tmpc.terminal_set.as_ref().expect("tube MPC has a terminal set");
            out.push(Certificate::holds(
                "terminal_set_control_invariant",
                setcalc::is_control_invariant(&self.system.a, &self.system.b, zf, &self.tmpc.tightened_input, 1e-7)?,
            ));
        }
        for (i, p) in self.parents.iter().enumerate() {
            let tag = if self.parents.len() == 1 { String::new() } else { format!("_{i}") };
            out.push(Certificate::at_most(&format!("parent_tube_rpi{tag}"), p.tube.certify(f64::INFINITY)?, RPI_TOL));
            let k = &p.tube.gain;
            let qbar = &p.q + k.transpose() * &p.r * k;
            let res = setcalc::lyap_residual(&p.tube.closed_loop, &qbar, &p.p_term);
            out.push(Certificate::at_most(&format!("parent_lyapunov_residual{tag}"), res / scale(&p.p_term), RESIDUAL_TOL));
            let lower = self.parents.get(i + 1).map_or(self.child.horizon, |l| l.horizon);
            out.push(Certificate::holds(&format!("update_rate{tag}"), p.check_update_rate(lower).is_ok()));
        }
        let bottom = self.parents.last().ok_or_else(|| DesignError::Invalid("no planner level".into()))?;
        let ep = bottom.tube.cross_section.translate(&bottom.target_offset)?;
        let ok = match &self.child_feasible_set {
            Some(zc) => ep.subset_of(zc, 1e-9)?,
            // Nonlinear Child: the Parent terminal set stands in for Z^C_N.
            None => ep.subset_of(bottom.terminal_set.as_ref().expect("planner terminal set"), 1e-9)?,
        };
        out.push(Certificate::holds(EP_SUBSET_CONTROLLABLE, ok));
        Ok(out)
    }

    pub fn failed_certificates(&self) -> Vec<&Certificate> {
        self.certificates.iter().filter(|c| !c.passed).collect()
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if self.schema != SCHEMA_VERSION {
            return Err(DesignError::Invalid(format!("bundle schema {} is not {}", self.schema, SCHEMA_VERSION)));
        }
        self.tmpc.validate()?;
        self.child.validate()?;
        for p in &self.parents {
            p.validate()?;
        }
        Ok(())
    }

    pub fn tmpc_with_horizon(&self, horizon: usize) -> Result<TubeMpc, DesignError> {
        let cfg = LayerConfig { horizon, ..self.tmpc.clone() };
        Ok(TubeMpc::new(cfg, self.ancillary.clone(), self.system.u.clone(), self.settings.clone())?)
    }

    pub fn supervisor(&self, variant: Variant) -> Result<Supervisor, DesignError> {
        self.supervisor_with(self.parents.clone(), variant)
    }

    /// Supervisor over an explicit planner stack (top first).
    pub fn supervisor_with(&self, levels: Vec<LayerConfig>, variant: Variant) -> Result<Supervisor, DesignError> {
        let secondary = self.tmpc_with_horizon(self.secondary_horizon)?;
        Ok(stack_layers(
            levels,
            self.child.clone(),
            self.ancillary.clone(),
            secondary,
            &self.system.x,
            self.system.u.clone(),
            variant,
            self.settings.clone(),
        )?)
    }

    /// Build the controller named by `kind`. `det` uses the disturbance-free
    /// design when one is attached.
    pub fn controller(&self, kind: ControllerKind) -> Result<Box<dyn Controller + Send>, DesignError> {
        Ok(match kind {
            ControllerKind::Tmpc => Box::new(self.tmpc_with_horizon(self.tmpc.horizon)?),
            ControllerKind::TmpcExt => Box::new(self.tmpc_with_horizon(self.ext_horizon)?),
            ControllerKind::Pc => Box::new(self.supervisor(Variant::Robust)?),
            ControllerKind::Det => {
                let base = self.det.as_deref().ok_or_else(|| DesignError::Invalid("this design has no deterministic variant".into()))?;
                Box::new(base.supervisor(Variant::Deterministic)?)
            }
        })
    }

    /// The first QP the controller solves from `x0`: the tube MPC problem
    /// for `tmpc`/`tmpc_ext`, the top planner problem otherwise.
    pub fn first_qp(&self, kind: ControllerKind) -> Result<QpProblem, DesignError> {
        let prob = match kind {
            ControllerKind::Tmpc => tmpc_problem(&self.tmpc, &self.x0)?,
            ControllerKind::TmpcExt => tmpc_problem(&LayerConfig { horizon: self.ext_horizon, ..self.tmpc.clone() }, &self.x0)?,
            ControllerKind::Pc => parent_problem(&self.parents[0], &self.x0)?,
            ControllerKind::Det => {
                let base = self.det.as_deref().ok_or_else(|| DesignError::Invalid("this design has no deterministic variant".into()))?;
                parent_problem(&base.parents[0], &base.x0)?
            }
        };
        prob.condensed_qp()?.ok_or_else(|| DesignError::Invalid("the first problem is nonlinear".into()))
    }

    /// Three-level case-1 stack: a slow planner with `|v| <= top_input` above
    /// a 30-step copy of the Parent. The top tube is the maximal positive
    /// invariant set inside `0.95 (C - t)`, where `C` is the 30-step
    /// controllable set of the middle planner.
    pub fn three_level_stack(&self, top_input: f64) -> Result<Vec<LayerConfig>, DesignError> {
        if self.case != CaseId::Case1 {
            return Err(DesignError::Invalid("the three-level stack is defined for case 1".into()));
        }
        let parent = &self.parents[0];
        let mid = LayerConfig { horizon: 30, input_hold: 1, ..parent.clone() };
        let (a, b) = (&mid.model.a, &mid.model.b);
        let t = &mid.target_offset;
        let mid_bound = half_width(&mid.tightened_input)?;
        let c = setcalc::controllable_set_n(a, b, None, &mid.tightened_state, &mid.tightened_input, mid.terminal_set.as_ref().expect("terminal"), mid.horizon)?;
        if c.emptied {
            return Err(DesignError::Invalid("middle controllable set became empty".into()));
        }
        let kt = m(1, 2, &[-0.002, -0.07]);
        let aclt = a + b * &kt;
        let region = c.last().translate(&-t)?.scale(0.95).intersect(&gain_slab(&kt, mid_bound - top_input)?)?;
        let et = setcalc::max_positive_invariant(&aclt, &region, 500)?;
        if !et.converged || et.set.is_empty() {
            return Err(DesignError::Invalid("top tube recursion failed".into()));
        }
        let xs = mid.tightened_state.pontryagin_diff(&et.set)?;
        let vt = Polytope::symmetric_box(&[top_input])?;
        let zft = parent_terminal(&aclt, &kt, &xs, &vt, t)?;
        let top = LayerConfig {
            p_term: parent_cost(&aclt, &kt, &parent.q, &parent.r)?,
            tube: TubeDesign::new(a, b, kt, et.set, Polytope::origin(2)),
            tightened_state: xs,
            tightened_input: vt,
            terminal_set: Some(zft),
            ..parent.clone()
        };
        Ok(vec![top, mid])
    }
}
