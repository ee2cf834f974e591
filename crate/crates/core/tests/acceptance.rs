//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! The process exits 0 even when a criterion fails so that the workspace
//! test run reports the harness output instead of aborting on it. Set
//! `TUBEMPC_ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use tubempc::design::{design, CaseId, ControllerKind, DesignBundle, DesignOptions, RESIDUAL_TOL, RPI_TOL};
use tubempc::mpc::layer::LayerProblem;
use tubempc::mpc::{tmpc_problem, Controller, Phase, Variant, WARM_START_TOL};
use tubempc::polytope::Polytope;
use tubempc::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use tubempc::setcalc;
use tubempc::sim::{parallel_map, run_batch, run_bundle, worker_threads, DisturbanceMode, RunLog};
use tubempc::sqp::{finite_difference_jacobian, Nlp};

struct Outcome {
    id: &'static str,
    pass: bool,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass }
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

struct Batches {
    case1: DesignBundle,
    case2: DesignBundle,
    pc1: Vec<RunLog>,
    pc2: Vec<RunLog>,
    seconds: f64,
    errors: Vec<String>,
}

fn batches() -> Batches {
    let t = Instant::now();
    let case1 = design(CaseId::Case1, &DesignOptions::default()).expect("case-1 design");
    let case2 = design(CaseId::Case2, &DesignOptions::default()).expect("case-2 design");
    let threads = worker_threads();
    let mut errors = vec![];
    let mut collect = |rs: Vec<Result<RunLog, _>>| -> Vec<RunLog> {
        rs.into_iter()
            .filter_map(|r: Result<RunLog, tubempc::sim::SimError>| r.map_err(|e| errors.push(e.to_string())).ok())
            .collect()
    };
    let s1: Vec<u64> = (0..50).collect();
    let s2: Vec<u64> = (0..20).collect();
    let pc1 = collect(run_batch(&case1, ControllerKind::Pc, 60, &s1, DisturbanceMode::UniformBox, threads));
    let pc2 = collect(run_batch(&case2, ControllerKind::Pc, 60, &s2, DisturbanceMode::UniformBox, threads));
    Batches { case1, case2, pc1, pc2, seconds: t.elapsed().as_secs_f64(), errors }
}

fn criterion1(b: &Batches) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut solves = 0;
    let mut missing = 0;
    let mut infeasible = 0;
    for log in b.pc1.iter().chain(&b.pc2) {
        infeasible += usize::from(log.infeasible_step.is_some());
        for r in log.records.iter().filter(|r| r.feasible && r.phase == Phase::Primary) {
            match r.warm_violation {
                Some(w) => {
                    worst = worst.max(w);
                    solves += 1;
                }
                None => missing += 1,
            }
        }
    }
    let runs = b.pc1.len() + b.pc2.len();
    let pass = runs == 70 && b.errors.is_empty() && infeasible == 0 && missing == 0 && worst <= WARM_START_TOL && b.seconds < 300.0;
    outcome(
        "1",
        pass,
        format!(
            "{runs}/70 runs, {solves} Child solves, max warm-start violation {worst:.2e} (tol {WARM_START_TOL:e}), {infeasible} infeasible, {} errors, {:.1} s",
            b.errors.len(),
            b.seconds
        ),
    )
}

/// Checks `z^C_j ∈ z^P_j ⊕ E^P` through the logged tube margin, and that
/// `z^C` never leaves `E^P` during the Parent-Child phase once inside it,
/// both for `E^P` itself and for `E^P` translated by the Parent target.
fn criterion2(b: &Batches) -> Outcome {
    let tol = 1e-8;
    let mut margin: f64 = 0.0;
    let mut left = 0;
    let mut entered = 0;
    for (bundle, logs) in [(&b.case1, &b.pc1), (&b.case2, &b.pc2)] {
        let p = &bundle.parents[bundle.parents.len() - 1];
        let ep = &p.tube.cross_section;
        let ep_t = ep.translate(&p.target_offset).expect("translate");
        for log in logs {
            let primary: Vec<_> = log.records.iter().filter(|r| r.feasible && r.phase == Phase::Primary).collect();
            for r in &primary {
                margin = margin.max(r.tube_margin.unwrap_or(f64::INFINITY));
            }
            for set in [ep, &ep_t] {
                let inside: Vec<bool> = primary.iter().map(|r| set.contains(&v(&r.z_child), tol)).collect();
                if let Some(first) = inside.iter().position(|&i| i) {
                    entered += 1;
                    if inside[first..].iter().any(|&i| !i) {
                        left += 1;
                    }
                }
            }
        }
    }
    let pass = margin <= tol && left == 0 && b.errors.is_empty();
    outcome("2", pass, format!("max tube violation {margin:.2e} (tol {tol:e}); {entered} entries into E^P, {left} exits while the architecture was active"))
}

fn criterion3() -> Outcome {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let bm = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let k = setcalc::solve_dare(&a, &bm, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 10.0)).expect("dare").k;
    let target = [0.2054, 0.7835];
    let err = (0..2).map(|i| (k[i].abs() - target[i]).abs()).fold(0.0, f64::max);
    outcome("3", err <= 1e-3, format!("|K| = [{:.4}, {:.4}], max deviation {err:.1e} from [0.2054, 0.7835]", k[0].abs(), k[1].abs()))
}

fn criterion4(b: &Batches) -> Outcome {
    let s = &b.case1.summary;
    let lower = s.tightened_state_lower[0];
    let input = s.tightened_input_bound;
    let pass = (lower + 40.77).abs() <= 0.05 && (input - 2.86).abs() <= 0.05;
    outcome("4", pass, format!("tightened z[1] >= {lower:.3} (target -40.77), |v| <= {input:.3} (target 2.86), tol 0.05"))
}

fn criterion5(b: &Batches) -> Vec<Outcome> {
    let seeds: Vec<u64> = (0..8).collect();
    // Sequential so that timings are not distorted by parallel runs.
    let pc: Vec<RunLog> = seeds.iter().map(|&s| run_bundle(&b.case1, ControllerKind::Pc, 60, s, DisturbanceMode::UniformBox).expect("pc run")).collect();
    let tm: Vec<RunLog> = seeds.iter().map(|&s| run_bundle(&b.case1, ControllerKind::Tmpc, 60, s, DisturbanceMode::UniformBox).expect("tmpc run")).collect();
    let switches: Vec<Option<usize>> = pc.iter().map(|l| l.switch_step()).collect();
    let in_band = switches.iter().filter(|s| s.is_some_and(|k| (36..=46).contains(&k))).count();
    let a = outcome("5a", in_band == seeds.len(), format!("switch steps {switches:?}, {in_band}/{} in [36, 46]", seeds.len()));
    let gaps: Vec<f64> = pc.iter().zip(&tm).map(|(p, t)| (p.final_cost() - t.final_cost()) / t.final_cost()).collect();
    let ok = gaps.iter().all(|&g| (0.0..=0.05).contains(&g)) && tm.iter().chain(&pc).all(|l| l.infeasible_step.is_none());
    let shown: Vec<String> = gaps.iter().map(|g| format!("{:.2}%", 100.0 * g)).collect();
    let bb = outcome("5b", ok, format!("relative gaps (PC - TMPC) / TMPC = [{}], required in [0, 5%]", shown.join(", ")));
    let mean = |ls: &[RunLog]| ls.iter().map(|l| l.mean_solve_us()).sum::<f64>() / ls.len() as f64;
    let (tp, tt) = (mean(&pc), mean(&tm));
    let c = outcome("5c", tp < tt, format!("mean solve time per step: Parent-Child {tp:.0} us, TMPC-{} {tt:.0} us", b.case1.tmpc.horizon));
    vec![a, bb, c]
}

/// Largest `p` in `[lo, hi]` with `feasible([p, 0])`, by bisection to `tol`,
/// assuming `feasible(lo)`.
fn reach(lo: f64, hi: f64, tol: f64, feasible: impl Fn(f64) -> bool) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    if feasible(hi) {
        return hi;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn criterion6(b: &Batches) -> Outcome {
    let t = Instant::now();
    let bundle = &b.case1;
    let settings = &bundle.settings;
    let tmpc_ok = |p: f64| {
        tmpc_problem(&bundle.tmpc, &v(&[p, 0.0])).and_then(|prob: LayerProblem| prob.solve(None, &settings.qp, &settings.sqp, "tmpc")).is_ok()
    };
    let pc_ok = |p: f64| bundle.supervisor(Variant::Robust).expect("supervisor").step(&v(&[p, 0.0])).is_ok();
    let xmax = bundle.system.x.bounding_box().expect("X bounded").1[0];
    let r_tmpc = reach(0.0, xmax, 1.0, tmpc_ok);
    let probe = 3.0 * r_tmpc;
    let pc_probe = probe <= xmax && pc_ok(probe);
    let r_pc = reach(r_tmpc, xmax, 1.0, pc_ok);
    // Informational: three times the preset start position.
    let from_x0 = pc_ok(3.0 * bundle.x0[0]);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        "6",
        pc_probe && secs < 120.0,
        format!(
            "TMPC-{} reach {r_tmpc:.0}; Parent-Child feasible at 3x = {probe:.0}: {pc_probe}; Parent-Child reach {r_pc:.0} ({:.2}x); feasible at 3 x0 = {:.0}: {from_x0}; {secs:.1} s",
            bundle.tmpc.horizon,
            r_pc / r_tmpc.max(1e-9),
            3.0 * bundle.x0[0]
        ),
    )
}

fn criterion7(b: &Batches) -> Outcome {
    let base = run_bundle(&b.case2, ControllerKind::Tmpc, 60, 0, DisturbanceMode::UniformBox).expect("tmpc run");
    let pc = run_bundle(&b.case2, ControllerKind::Pc, 60, 0, DisturbanceMode::UniformBox).expect("pc run");
    let zf = b.case2.tmpc.terminal_set.as_ref().expect("terminal set");
    let reached = pc.records.iter().position(|r| r.feasible && zf.contains(&v(&r.z_child), 1e-9));
    let pass = base.infeasible_step == Some(0) && pc.infeasible_step.is_none() && pc.records.len() == 60 && reached.is_some();
    outcome(
        "7",
        pass,
        format!(
            "baseline TMPC-{} infeasible at step {:?}; Parent-Child completed {} steps, nominal Child state in the terminal set from step {reached:?}",
            b.case2.tmpc.horizon,
            base.infeasible_step,
            pc.records.len()
        ),
    )
}

fn criterion8() -> Outcome {
    // Parent model of the printed design: slope 0.46 in the second row, the
    // gain [0.051, 0] acting with negative feedback.
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.46, 0.0]);
    let bm = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let k = DMatrix::from_row_slice(1, 2, &[-0.051, 0.0]);
    let w = Polytope::from_box(&[0.0, -0.4], &[0.0, 0.4]).expect("W");
    let e = setcalc::rpi_outer(&(&a + &bm * &k), &w, 0.001, 1e-9).expect("rpi");
    let (lo, hi) = e.set.bounding_box().expect("bounded");
    let bound = (0..2).map(|i| hi[i].max(-lo[i])).fold(0.0, f64::max);
    let kd = setcalc::solve_dare(&a, &bm, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 20.0)).expect("dare").k;
    outcome(
        "8",
        (bound - 0.68).abs() <= 0.02,
        format!("|e^P| <= [{:.3}, {:.3}] (target 0.68, tol 0.02); DARE(R = 20) gain for reference [{:.3}, {:.3}]", hi[0].max(-lo[0]), hi[1].max(-lo[1]), kd[0], kd[1]),
    )
}

fn criterion9(b: &Batches) -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let ext = run_batch(&b.case2, ControllerKind::TmpcExt, 60, &seeds, DisturbanceMode::UniformBox, worker_threads());
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for (pc, ext) in b.pc2.iter().zip(&ext) {
        match ext {
            Ok(e) if e.infeasible_step.is_none() && pc.infeasible_step.is_none() => {
                worst = worst.max((pc.final_cost() - e.final_cost()).abs() / e.final_cost());
            }
            _ => bad += 1,
        }
    }
    let pass = bad == 0 && b.pc2.len() == seeds.len() && worst <= 0.10;
    outcome("9", pass, format!("max |PC - TMPC-{}| / TMPC-{} = {:.2}% over {} seeds (tol 10%), {bad} failed runs", b.case2.ext_horizon, b.case2.ext_horizon, 100.0 * worst, seeds.len()))
}

/// Best objective over the stationary points of every active subset that
/// are feasible; exact for strictly convex QPs.
fn enumeration_oracle(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> (f64, DVector<f64>) {
    let (n, m) = (h.nrows(), a.nrows());
    let mut best = (f64::INFINITY, DVector::zeros(n));
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > n {
            continue;
        }
        let k = n + act.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (j, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = a[(i, c)];
                kkt[(c, n + j)] = a[(i, c)];
            }
            rhs[n + j] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if (a * &x - b).iter().all(|&s| s <= 1e-9) {
            let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            if obj < best.0 {
                best = (obj, x);
            }
        }
    }
    best
}

fn criterion10(b: &Batches) -> Outcome {
    // Riccati and Lyapunov residuals and RPI certificates of every shipped design.
    let mut bundles = vec![&b.case1, &b.case2];
    bundles.extend(b.case1.det.as_deref());
    let mut residual: f64 = 0.0;
    let mut rpi: f64 = 0.0;
    let mut failed = vec![];
    for bundle in &bundles {
        for c in &bundle.certificates {
            if c.name.contains("residual") {
                residual = residual.max(c.value);
            }
            if c.name.contains("rpi") {
                rpi = rpi.max(c.value);
            }
            if !c.passed {
                failed.push(c.name.clone());
            }
        }
    }

    // QP against the enumeration oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut qp_err: f64 = 0.0;
    let mut qp_bad = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=7);
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let interior = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let b_in = &a * &interior + DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
        let (obj, x_ref) = enumeration_oracle(&h, &f, &a, &b_in);
        let prob = QpProblem::inequality(h, f, a, b_in).expect("valid QP");
        match solve_qp(&prob, &QpSettings::default()) {
            Ok(r) if r.status == QpStatus::Optimal => {
                let e = ((r.objective - obj).abs() / (1.0 + obj.abs())).max((&r.x - &x_ref).amax() / (1.0 + x_ref.amax()));
                qp_err = qp_err.max(e);
            }
            _ => qp_bad += 1,
        }
    }

    // SQP derivatives of the nonlinear case-2 problem against central differences.
    let prob = tmpc_problem(&b.case2.tmpc, &b.case2.x0).expect("case-2 problem");
    let asm = prob.assemble();
    let mut grad_err: f64 = 0.0;
    for _ in 0..10 {
        let y = DVector::from_fn(asm.dim(), |_, _| rng.gen_range(-2.0..2.0));
        let g = asm.gradient(&y);
        let gf = finite_difference_jacobian(|x| DVector::from_element(1, asm.objective(x)), &y, 1e-6).row(0).transpose();
        grad_err = grad_err.max((&g - &gf).amax() / (1.0 + g.amax()));
        let j = asm.eq_jacobian(&y);
        let jf = finite_difference_jacobian(|x| asm.eq_constraints(x), &y, 1e-6);
        grad_err = grad_err.max((&j - &jf).amax() / (1.0 + j.amax()));
    }

    let pass = failed.is_empty() && residual <= RESIDUAL_TOL && rpi <= RPI_TOL && qp_bad == 0 && qp_err <= 1e-6 && grad_err <= 1e-4;
    outcome(
        "10",
        pass,
        format!(
            "residuals <= {residual:.1e}, RPI violation <= {rpi:.1e} over {} designs (failed: {failed:?}); QP vs oracle max error {qp_err:.1e}, {qp_bad}/200 not optimal; SQP derivative error {grad_err:.1e}",
            bundles.len()
        ),
    )
}

fn main() {
    let t = Instant::now();
    let b = batches();
    for e in &b.errors {
        println!("run error: {e}");
    }
    let mut all = vec![criterion1(&b), criterion2(&b), criterion3(), criterion4(&b)];
    all.extend(criterion5(&b));
    // Probes are independent of each other; run the heavy ones side by side.
    let heavy: Vec<Outcome> = parallel_map(&[6u8, 7, 8, 9, 10], worker_threads(), |&c| match c {
        6 => criterion6(&b),
        7 => criterion7(&b),
        8 => criterion8(),
        9 => criterion9(&b),
        _ => criterion10(&b),
    });
    all.extend(heavy);
    let failed: Vec<&str> = all.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {}/{} criteria passed in {:.1} s; failing: {failed:?}", all.len() - failed.len(), all.len(), t.elapsed().as_secs_f64());
    if !failed.is_empty() && std::env::var("TUBEMPC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
