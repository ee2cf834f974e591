//! Seeded closed-loop simulation, run logs and their CSV/JSON forms.

use crate::design::{ControllerKind, DesignBundle, DesignError};
use crate::mpc::{Controller, LipschitzSystem, MpcError, Phase, INPUT_TOL};
use crate::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("input {u:?} leaves U by {violation:e} at step {step}")]
    InputOutsideU { step: usize, u: Vec<f64>, violation: f64 },
    #[error("state leaves X by {violation:e} at step {step}")]
    StateOutsideX { step: usize, violation: f64 },
    #[error("invariant breach at step {step}: {what}")]
    Invariant { step: usize, what: String },
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("malformed run log: {0}")]
    Parse(String),
}

/// Plant update `A x + g(x) + B u + w`, rejecting inputs outside `U`.
pub fn plant_step(sys: &LipschitzSystem, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, SimError> {
    sys.plant_step(x, u, w).map_err(|violation| SimError::InputOutsideU { step: 0, u: u.iter().copied().collect(), violation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    UniformBox,
    Vertices,
    Zero,
}

/// Deterministic disturbance samples in `W`.
#[derive(Debug, Clone)]
pub struct DisturbanceStream {
    pub seed: u64,
    pub w: Polytope,
    pub mode: DisturbanceMode,
    rng: ChaCha8Rng,
    lo: DVector<f64>,
    hi: DVector<f64>,
    vertices: Vec<DVector<f64>>,
    next_vertex: usize,
}

impl DisturbanceStream {
    pub fn new(seed: u64, w: Polytope, mode: DisturbanceMode) -> Result<Self, SimError> {
        let (lo, hi) = w.bounding_box().map_err(|e| SimError::Parse(e.to_string()))?;
        let vertices = match mode {
            DisturbanceMode::Vertices => w.vertices().map_err(|e| SimError::Parse(e.to_string()))?,
            _ => vec![],
        };
        Ok(DisturbanceStream { seed, w, mode, rng: ChaCha8Rng::seed_from_u64(seed), lo, hi, vertices, next_vertex: 0 })
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let n = self.w.dim();
        match self.mode {
            DisturbanceMode::Zero => DVector::zeros(n),
            DisturbanceMode::Vertices => {
                let v = self.vertices[self.next_vertex % self.vertices.len()].clone();
                self.next_vertex += 1;
                v
            }
            DisturbanceMode::UniformBox => loop {
                let (lo, hi) = (&self.lo, &self.hi);
                let rng = &mut self.rng;
                let w = DVector::from_fn(n, |i, _| if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] });
                if self.w.contains(&w, 1e-12) {
                    return w;
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub z_child: Vec<f64>,
    /// NaN when no planner is active.
    pub z_parent: Vec<f64>,
    pub phase: Phase,
    pub cost_stage: f64,
    pub cost_cum: f64,
    pub t_child_us: f64,
    pub t_parent_us: f64,
    pub feasible: bool,
    pub parent_solved: bool,
    pub reinit: bool,
    pub warm_violation: Option<f64>,
    pub tube_margin: Option<f64>,
    pub in_parent_tube: bool,
    pub switched: bool,
    pub clip: f64,
    pub child_cost: f64,
    pub warm_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub controller: String,
    pub records: Vec<StepRecord>,
    /// Step at which the controller reported infeasibility, if any.
    pub infeasible_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_cost: f64,
    pub switch_step: Option<usize>,
    pub mean_t_child_us: f64,
    pub mean_t_parent_us: f64,
    pub infeasible_step: Option<usize>,
}

pub const CSV_HEADER: &str = "step,x1,x2,u,zc1,zc2,zp1,zp2,phase,cost_stage,cost_cum,t_child_us,t_parent_us,feasible";

fn stage_cost(q: &DMatrix<f64>, r: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    x.dot(&(q * x)) + u.dot(&(r * u))
}

/// Closed-loop run. Controller infeasibility ends the run early and is
/// recorded; a breach of `X`, `U` or the Parent warm-start certificate is
/// returned as an error.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    sys: &LipschitzSystem,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    steps: usize,
    stream: &mut DisturbanceStream,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    controller_id: &str,
    config_hash: &str,
) -> Result<RunLog, SimError> {
    let mut log = RunLog { seed: stream.seed, config_hash: config_hash.into(), controller: controller_id.into(), records: vec![], infeasible_step: None };
    let mut x = x0.clone();
    let mut cum = 0.0;
    let nan = |n: usize| vec![f64::NAN; n];
    for k in 0..steps {
        let xv = sys.x.violation(&x);
        if xv > 1e-9 * (1.0 + sys.x.b().amax()) {
            return Err(SimError::StateOutsideX { step: k, violation: xv });
        }
        let out = match controller.step(&x) {
            Ok(o) => o,
            Err(MpcError::Infeasible { .. }) => {
                log.records.push(StepRecord {
                    step: k,
                    x: x.iter().copied().collect(),
                    u: vec![0.0; sys.m()],
                    z_child: nan(sys.n()),
                    z_parent: nan(sys.n()),
                    phase: log.records.last().map_or(Phase::Primary, |r| r.phase),
                    cost_stage: 0.0,
                    cost_cum: cum,
                    t_child_us: 0.0,
                    t_parent_us: 0.0,
                    feasible: false,
                    parent_solved: false,
                    reinit: false,
                    warm_violation: None,
                    tube_margin: None,
                    in_parent_tube: false,
                    switched: false,
                    clip: 0.0,
                    child_cost: f64::NAN,
                    warm_cost: None,
                });
                log.infeasible_step = Some(k);
                return Ok(log);
            }
            Err(e) => return Err(e.into()),
        };
        if out.clip > INPUT_TOL {
            return Err(SimError::Invariant { step: k, what: format!("ancillary input clipped by {:e}", out.clip) });
        }
        let w = stream.sample();
        let next = sys.plant_step(&x, &out.u, &w).map_err(|violation| SimError::InputOutsideU { step: k, u: out.u.iter().copied().collect(), violation })?;
        let c = stage_cost(q, r, &x, &out.u);
        cum += c;
        log.records.push(StepRecord {
            step: k,
            x: x.iter().copied().collect(),
            u: out.u.iter().copied().collect(),
            z_child: out.z_child.iter().copied().collect(),
            z_parent: out.z_parent.as_ref().map_or_else(|| nan(sys.n()), |z| z.iter().copied().collect()),
            phase: out.phase,
            cost_stage: c,
            cost_cum: cum,
            t_child_us: out.t_child_us,
            t_parent_us: out.t_parent_us,
            feasible: true,
            parent_solved: out.parent_solved,
            reinit: out.reinit,
            warm_violation: out.warm_violation,
            tube_margin: out.tube_margin,
            in_parent_tube: out.in_parent_tube,
            switched: out.switched,
            clip: out.clip,
            child_cost: out.child_cost,
            warm_cost: out.warm_cost,
        });
        x = next;
    }
    Ok(log)
}

/// `Σ x'Qx + u'Ru` over the steps where an input was applied.
pub fn cumulative_cost(log: &RunLog, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    log.records
        .iter()
        .filter(|s| s.feasible)
        .map(|s| stage_cost(q, r, &DVector::from_column_slice(&s.x), &DVector::from_column_slice(&s.u)))
        .sum()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl RunLog {
    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cost_cum)
    }

    pub fn switch_step(&self) -> Option<usize> {
        self.records.iter().find(|r| r.switched).map(|r| r.step)
    }

    pub fn summary(&self) -> RunSummary {
        let feasible = || self.records.iter().filter(|r| r.feasible);
        RunSummary {
            final_cost: self.final_cost(),
            switch_step: self.switch_step(),
            mean_t_child_us: mean(feasible().map(|r| r.t_child_us)),
            mean_t_parent_us: mean(feasible().map(|r| r.t_parent_us)),
            infeasible_step: self.infeasible_step,
        }
    }

    /// Mean total solve time per step.
    pub fn mean_solve_us(&self) -> f64 {
        mean(self.records.iter().filter(|r| r.feasible).map(|r| r.t_child_us + r.t_parent_us))
    }

    pub fn to_csv(&self) -> Result<String, SimError> {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            if r.x.len() != 2 || r.u.len() != 1 {
                return Err(SimError::Parse("the CSV layout needs two states and one input".into()));
            }
            let phase = match r.phase {
                Phase::Primary => "primary",
                Phase::Secondary => "secondary",
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:.1},{:.1},{}",
                r.step,
                r.x[0],
                r.x[1],
                r.u[0],
                r.z_child[0],
                r.z_child[1],
                r.z_parent[0],
                r.z_parent[1],
                phase,
                r.cost_stage,
                r.cost_cum,
                r.t_child_us,
                r.t_parent_us,
                u8::from(r.feasible)
            )
            .expect("writing to a String");
        }
        Ok(s)
    }

    /// Same as [`RunLog::to_csv`] with the timing columns zeroed, for
    /// comparing runs byte by byte.
    pub fn to_csv_untimed(&self) -> Result<String, SimError> {
        let mut l = self.clone();
        for r in &mut l.records {
            r.t_child_us = 0.0;
            r.t_parent_us = 0.0;
        }
        l.to_csv()
    }

    /// Parse a CSV written by [`RunLog::to_csv`]. Diagnostics that are not
    /// part of the CSV are left empty.
    pub fn from_csv(text: &str) -> Result<RunLog, SimError> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(SimError::Parse("unexpected header".into()));
        }
        let mut records = vec![];
        let mut infeasible_step = None;
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(SimError::Parse(format!("line {} has {} fields", i + 2, f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|e| SimError::Parse(format!("line {}: {e}", i + 2)));
            let phase = match f[8] {
                "primary" => Phase::Primary,
                "secondary" => Phase::Secondary,
                p => return Err(SimError::Parse(format!("unknown phase {p}"))),
            };
            let feasible = f[13] == "1";
            let step = f[0].parse::<usize>().map_err(|e| SimError::Parse(e.to_string()))?;
            if !feasible {
                infeasible_step = Some(step);
            }
            records.push(StepRecord {
                step,
                x: vec![num(1)?, num(2)?],
                u: vec![num(3)?],
                z_child: vec![num(4)?, num(5)?],
                z_parent: vec![num(6)?, num(7)?],
                phase,
                cost_stage: num(9)?,
                cost_cum: num(10)?,
                t_child_us: num(11)?,
                t_parent_us: num(12)?,
                feasible,
                parent_solved: false,
                reinit: false,
                warm_violation: None,
                tube_margin: None,
                in_parent_tube: false,
                switched: false,
                clip: 0.0,
                child_cost: f64::NAN,
                warm_cost: None,
            });
        }
        Ok(RunLog { seed: 0, config_hash: String::new(), controller: String::new(), records, infeasible_step })
    }

    /// Re-check the logged trajectory: `x ∈ X`, `u ∈ U`, nonnegative stage
    /// costs and `cost_cum` as their prefix sum.
    pub fn check(&self, sys: &LipschitzSystem) -> Result<(), SimError> {
        let mut cum = 0.0;
        for r in &self.records {
            let bad = |what: String| Err(SimError::Invariant { step: r.step, what });
            let x = DVector::from_column_slice(&r.x);
            let u = DVector::from_column_slice(&r.u);
            if !sys.x.contains(&x, 1e-9 * (1.0 + sys.x.b().amax())) {
                return bad("state outside X".into());
            }
            if r.feasible && !sys.u.contains(&u, INPUT_TOL) {
                return bad("input outside U".into());
            }
            if r.cost_stage < 0.0 {
                return bad("negative stage cost".into());
            }
            cum += r.cost_stage;
            if (cum - r.cost_cum).abs() > 1e-9 * (1.0 + cum.abs()) {
                return bad(format!("cost_cum {} differs from prefix sum {}", r.cost_cum, cum));
            }
        }
        Ok(())
    }
}

/// Stable hash of a serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use std::hash::{DefaultHasher, Hash, Hasher};
    let mut h = DefaultHasher::new();
    serde_json::to_string(cfg).unwrap_or_default().hash(&mut h);
    format!("{:016x}", h.finish())
}

/// One seeded run of a bundle's controller with uniform disturbances.
pub fn run_bundle(bundle: &DesignBundle, kind: ControllerKind, steps: usize, seed: u64, mode: DisturbanceMode) -> Result<RunLog, SimError> {
    let base = match kind {
        ControllerKind::Det => bundle.det.as_deref().unwrap_or(bundle),
        _ => bundle,
    };
    let mut ctrl = bundle.controller(kind)?;
    let mut stream = DisturbanceStream::new(seed, base.system.w.clone(), mode)?;
    let hash = config_hash(&(bundle, kind, steps));
    run_closed_loop(&base.system, ctrl.as_mut(), &bundle.x0, steps, &mut stream, &bundle.q_eval, &bundle.r_eval, kind.as_str(), &hash)
}

/// Worker count: `TUBEMPC_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("TUBEMPC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run `f` over `items` on up to `threads` scoped workers, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every item processed")).collect()
}

/// Seeded runs in parallel, one isolated controller and stream per seed.
pub fn run_batch(bundle: &DesignBundle, kind: ControllerKind, steps: usize, seeds: &[u64], mode: DisturbanceMode, threads: usize) -> Vec<Result<RunLog, SimError>> {
    parallel_map(seeds, threads, |&seed| run_bundle(bundle, kind, steps, seed, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{design_case1, DesignOptions};
    use crate::mpc::Nonlinearity;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn integrator() -> LipschitzSystem {
        LipschitzSystem {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            g: Nonlinearity::Zero,
            lipschitz: 0.0,
            w: Polytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            x: Polytope::symmetric_box(&[1e4, 1e4]).unwrap(),
            u: Polytope::symmetric_box(&[5.0]).unwrap(),
        }
    }

    #[test]
    fn plant_step_examples() {
        let s = integrator();
        assert_eq!(plant_step(&s, &v(&[0.0, 0.0]), &v(&[0.0]), &v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(plant_step(&s, &v(&[2700.0, 0.0]), &v(&[-5.0]), &v(&[0.0, 0.0])).unwrap(), v(&[2700.0, -5.0]));
        assert!(matches!(plant_step(&s, &v(&[0.0, 0.0]), &v(&[6.0]), &v(&[0.0, 0.0])), Err(SimError::InputOutsideU { .. })));
    }

    #[test]
    fn disturbance_streams() {
        let w = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        let mut z = DisturbanceStream::new(3, w.clone(), DisturbanceMode::Zero).unwrap();
        assert!(z.sample().amax() == 0.0);
        let mut a = DisturbanceStream::new(9, w.clone(), DisturbanceMode::UniformBox).unwrap();
        let mut b = DisturbanceStream::new(9, w.clone(), DisturbanceMode::UniformBox).unwrap();
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut max: f64 = 0.0;
        for _ in 0..n {
            let s = a.sample();
            assert_eq!(s, b.sample());
            max = max.max(s.amax());
            sum += s;
        }
        assert!(max <= 1.0);
        assert!((sum / n as f64).amax() < 0.02);
        let mut c = DisturbanceStream::new(1, w, DisturbanceMode::Vertices).unwrap();
        let first = c.sample();
        assert!((first.amax() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_cost_examples() {
        let rec = |x: Vec<f64>, u: Vec<f64>, c: f64| StepRecord {
            step: 0,
            x,
            u,
            z_child: vec![0.0; 2],
            z_parent: vec![0.0; 2],
            phase: Phase::Primary,
            cost_stage: c,
            cost_cum: c,
            t_child_us: 0.0,
            t_parent_us: 0.0,
            feasible: true,
            parent_solved: false,
            reinit: false,
            warm_violation: None,
            tube_margin: None,
            in_parent_tube: false,
            switched: false,
            clip: 0.0,
            child_cost: 0.0,
            warm_cost: None,
        };
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let mut log = RunLog { seed: 0, config_hash: String::new(), controller: String::new(), records: vec![], infeasible_step: None };
        assert_eq!(cumulative_cost(&log, &q, &r), 0.0);
        log.records.push(rec(vec![0.0, 0.0], vec![0.0], 0.0));
        assert_eq!(cumulative_cost(&log, &q, &r), 0.0);
        log.records = vec![rec(vec![1.0, 0.0], vec![1.0], 2.0)];
        assert_eq!(cumulative_cost(&log, &q, &r), 2.0);
    }

    #[test]
    fn zero_steps_gives_empty_log() {
        let b = design_case1(&DesignOptions::default()).unwrap();
        let log = run_bundle(&b, ControllerKind::Pc, 0, 7, DisturbanceMode::UniformBox).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(log.controller, "pc");
        assert_eq!(log.seed, 7);
        assert_eq!(log.to_csv().unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..20).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), (0..20).map(|x| x * 2).collect::<Vec<_>>());
    }
}
