//! Command-line front end. The binary parses arguments and maps
//! [`CliError`] to an exit code; every command is a call into the library.

use crate::design::{design, CaseId, ControllerKind, DesignBundle, DesignError, DesignOptions, EP_SUBSET_CONTROLLABLE};
use crate::sim::{parallel_map, run_bundle, worker_threads, DisturbanceMode, RunLog, SimError};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CERTIFICATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("design certification failed: {0}")]
    Certification(String),
    #[error("controller infeasible at step {step} (seed {seed})")]
    Infeasible { seed: u64, step: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Certification(_) | CliError::Design(DesignError::Certificate { .. }) => EXIT_CERTIFICATION,
            CliError::Infeasible { .. } => EXIT_INFEASIBLE,
            _ => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseSel {
    #[default]
    Case1,
    Case2,
    /// A design bundle loaded from `paths.design_bundle`.
    Custom,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub design_bundle: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// A run, as read from a JSON config file. Command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub case: CaseSel,
    pub controller: ControllerKind,
    pub steps: usize,
    pub seed: u64,
    /// Half-open seed range `a..b`; replaces `seed` when set.
    pub seeds: Option<String>,
    pub paths: Paths,
    pub emit_sets: bool,
    pub dump_qp: bool,
    /// Write zeros in the timing columns so reruns compare byte for byte.
    pub untimed: bool,
    pub disturbance: DisturbanceMode,
    pub overrides: DesignOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: CaseSel::Case1,
            controller: ControllerKind::Pc,
            steps: 60,
            seed: 0,
            seeds: None,
            paths: Paths::default(),
            emit_sets: false,
            dump_qp: false,
            untimed: false,
            disturbance: DisturbanceMode::UniformBox,
            overrides: DesignOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Seeds of the run: the `seeds` range if present, else `seed`.
    pub fn seed_list(&self) -> Result<Vec<u64>, CliError> {
        match &self.seeds {
            None => Ok(vec![self.seed]),
            Some(s) => parse_seed_range(s),
        }
    }
}

pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("seed range {s:?} is not of the form a..b with a < b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown controller {s:?} (tmpc, pc, det, tmpc_ext)"))
}

fn parse_case(s: &str) -> Result<CaseSel, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown case {s:?} (case1, case2, custom)"))
}

#[derive(Debug, Parser)]
#[command(name = "tubempc", version, about = "Parent-Child tube MPC designs, closed-loop runs and comparisons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and certify a design bundle.
    Design(CommonArgs),
    /// Closed-loop run(s) writing run.csv and summary.json.
    Run(RunArgs),
    /// Two runs on a shared disturbance stream and their cost report.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_case)]
    pub case: Option<CaseSel>,
    #[arg(long)]
    pub design_bundle: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub update_period: Option<usize>,
    #[arg(long)]
    pub input_hold: Option<usize>,
    /// Also write the tube, terminal and controllable sets as JSON.
    #[arg(long)]
    pub emit_sets: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = parse_controller)]
    pub controller: Option<ControllerKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed range `a..b`, run in parallel (TUBEMPC_THREADS caps workers).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Write the first QP the controller solves to qp.json.
    #[arg(long)]
    pub dump_qp: bool,
    #[arg(long)]
    pub untimed: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration of run A (defaults to `--config`).
    #[arg(long)]
    pub config_a: Option<PathBuf>,
    #[arg(long)]
    pub config_b: Option<PathBuf>,
    #[arg(long, value_parser = parse_controller)]
    pub controller_a: Option<ControllerKind>,
    #[arg(long, value_parser = parse_controller)]
    pub controller_b: Option<ControllerKind>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })?;
    }
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
    }
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(c) = self.case {
            cfg.case = c;
        }
        if let Some(p) = &self.design_bundle {
            cfg.paths.design_bundle = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.paths.out_dir = Some(p.clone());
        }
        if let Some(u) = self.update_period {
            cfg.overrides.update_period = Some(u);
        }
        if let Some(h) = self.input_hold {
            cfg.overrides.input_hold = Some(h);
        }
        cfg.emit_sets |= self.emit_sets;
    }
}

impl RunArgs {
    pub fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = load_config(self.common.config.as_deref())?;
        self.common.apply(&mut cfg);
        if let Some(c) = self.controller {
            cfg.controller = c;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.seeds = None;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = Some(s.clone());
        }
        cfg.dump_qp |= self.dump_qp;
        cfg.untimed |= self.untimed;
        Ok(cfg)
    }
}

impl CompareArgs {
    /// Configurations of runs A and B.
    pub fn configs(&self) -> Result<(RunConfig, RunConfig), CliError> {
        let side = |file: &Option<PathBuf>, controller: Option<ControllerKind>| -> Result<RunConfig, CliError> {
            let mut cfg = load_config(file.as_deref().or(self.common.config.as_deref()))?;
            self.common.apply(&mut cfg);
            if let Some(s) = self.steps {
                cfg.steps = s;
            }
            if let Some(s) = self.seed {
                cfg.seed = s;
            }
            if let Some(c) = controller {
                cfg.controller = c;
            }
            Ok(cfg)
        };
        Ok((side(&self.config_a, self.controller_a)?, side(&self.config_b, self.controller_b)?))
    }
}

fn apply_schedule(b: &mut DesignBundle, o: &DesignOptions) {
    for p in &mut b.parents {
        if let Some(u) = o.update_period {
            p.update_period = u;
        }
        if let Some(h) = o.input_hold {
            p.input_hold = h;
        }
    }
    if let Some(d) = b.det.as_deref_mut() {
        apply_schedule(d, o);
    }
}

fn recertify(b: &mut DesignBundle) -> Result<(), CliError> {
    b.validate()?;
    b.certificates = b.certify()?;
    if let Some(d) = b.det.as_deref_mut() {
        recertify(d)?;
    }
    Ok(())
}

/// The bundle a configuration runs on: loaded from `paths.design_bundle`
/// or designed from the preset, with every certificate recomputed.
/// Certificates are not enforced here; see [`require_certified`].
pub fn bundle_for(cfg: &RunConfig) -> Result<DesignBundle, CliError> {
    let mut b = match (&cfg.paths.design_bundle, cfg.case) {
        (Some(path), case) => {
            let b: DesignBundle = serde_json::from_str(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let expected = match case {
                CaseSel::Case1 => Some(CaseId::Case1),
                CaseSel::Case2 => Some(CaseId::Case2),
                CaseSel::Custom => None,
            };
            if expected.is_some_and(|c| c != b.case) {
                return Err(CliError::Usage(format!("{} holds a {:?} design", path.display(), b.case)));
            }
            let o = &cfg.overrides;
            let schedule_only = DesignOptions { update_period: o.update_period, input_hold: o.input_hold, ..Default::default() };
            if *o != schedule_only {
                return Err(CliError::Usage("design overrides other than update_period and input_hold need a fresh design".into()));
            }
            let mut b = b;
            apply_schedule(&mut b, o);
            b
        }
        (None, CaseSel::Case1) => design(CaseId::Case1, &cfg.overrides)?,
        (None, CaseSel::Case2) => design(CaseId::Case2, &cfg.overrides)?,
        (None, CaseSel::Custom) => return Err(CliError::Usage("case custom needs --design-bundle".into())),
    };
    recertify(&mut b)?;
    Ok(b)
}

pub fn require_certified(b: &DesignBundle) -> Result<(), CliError> {
    let failed: Vec<String> = b.failed_certificates().iter().map(|c| c.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Certification(failed.join(", ")))
    }
}

/// Sets for external plotting, keyed by name.
pub fn plot_sets(b: &DesignBundle) -> Result<serde_json::Value, CliError> {
    let mut m = serde_json::Map::new();
    let mut put = |k: &str, v: serde_json::Value| {
        m.insert(k.into(), v);
    };
    put("child_tube", serde_json::to_value(&b.child.tube.cross_section)?);
    put("tmpc_tube", serde_json::to_value(&b.tmpc.tube.cross_section)?);
    put("tmpc_terminal_set", serde_json::to_value(&b.tmpc.terminal_set)?);
    put("tmpc_tightened_state", serde_json::to_value(&b.tmpc.tightened_state)?);
    put("child_feasible_set", serde_json::to_value(&b.child_feasible_set)?);
    for (i, p) in b.parents.iter().enumerate() {
        let tag = if b.parents.len() == 1 { String::new() } else { format!("_{i}") };
        put(&format!("parent_tube{tag}"), serde_json::to_value(&p.tube.cross_section)?);
        put(&format!("parent_target{tag}"), serde_json::to_value(p.target_offset.iter().collect::<Vec<_>>())?);
        put(&format!("parent_terminal_set{tag}"), serde_json::to_value(&p.terminal_set)?);
        put(&format!("parent_tightened_state{tag}"), serde_json::to_value(&p.tightened_state)?);
    }
    Ok(serde_json::Value::Object(m))
}

fn certificate_report(b: &DesignBundle) -> String {
    let mut s = String::new();
    for c in &b.certificates {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{tag} {} value={:e} threshold={:e}\n", c.name, c.value, c.threshold));
    }
    s
}

/// `design`: write `bundle.json`, print the certificate report, and fail
/// with exit 2 naming every failed certificate.
pub fn cmd_design(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.apply(&mut cfg);
    let b = bundle_for(&cfg)?;
    let out = cfg.out_dir();
    write(&out.join("bundle.json"), &serde_json::to_string_pretty(&b)?)?;
    if cfg.emit_sets {
        write(&out.join("sets.json"), &serde_json::to_string_pretty(&plot_sets(&b)?)?)?;
    }
    print!("{}", certificate_report(&b));
    println!("{}", serde_json::to_string_pretty(&b.summary)?);
    if b.failed_certificates().iter().any(|c| c.name == EP_SUBSET_CONTROLLABLE) {
        eprintln!("{EP_SUBSET_CONTROLLABLE}: the Parent tube is not inside the Child controllable set");
    }
    require_certified(&b)
}

fn log_csv(log: &RunLog, untimed: bool) -> Result<String, CliError> {
    let csv = if untimed { log.to_csv_untimed()? } else { log.to_csv()? };
    // Schema check: the written text must parse back.
    RunLog::from_csv(&csv)?;
    Ok(csv)
}

/// Run every seed of `cfg` on `bundle`, in parallel when there are several.
pub fn run_logs(cfg: &RunConfig, bundle: &DesignBundle) -> Result<Vec<RunLog>, CliError> {
    let seeds = cfg.seed_list()?;
    let results = parallel_map(&seeds, worker_threads(), |&s| run_bundle(bundle, cfg.controller, cfg.steps, s, cfg.disturbance));
    results.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

/// `run`: one directory of artifacts per seed (the output directory itself
/// for a single seed). Exit 3 if any run hit controller infeasibility.
pub fn cmd_run(cfg: &RunConfig) -> Result<Vec<RunLog>, CliError> {
    let bundle = bundle_for(cfg)?;
    require_certified(&bundle)?;
    let out = cfg.out_dir();
    if cfg.emit_sets {
        write(&out.join("sets.json"), &serde_json::to_string_pretty(&plot_sets(&bundle)?)?)?;
    }
    if cfg.dump_qp {
        write(&out.join("qp.json"), &serde_json::to_string_pretty(&bundle.first_qp(cfg.controller)?)?)?;
    }
    let logs = run_logs(cfg, &bundle)?;
    let multi = cfg.seeds.is_some();
    for log in &logs {
        let dir = if multi { out.join(format!("seed_{}", log.seed)) } else { out.clone() };
        write(&dir.join("run.csv"), &log_csv(log, cfg.untimed)?)?;
        let summary = serde_json::to_string_pretty(&log.summary())?;
        write(&dir.join("summary.json"), &summary)?;
        println!("{}", serde_json::to_string(&log.summary())?);
    }
    if let Some(l) = logs.iter().find(|l| l.infeasible_step.is_some()) {
        return Err(CliError::Infeasible { seed: l.seed, step: l.infeasible_step.unwrap_or(0) });
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct CompareReport {
    pub final_cost_A: f64,
    pub final_cost_B: f64,
    /// Largest `|cost_cum_A - cost_cum_B|` over the common steps.
    pub max_cost_gap: f64,
    pub mean_solve_us_A: f64,
    pub mean_solve_us_B: f64,
}

pub fn compare_logs(a: &RunLog, b: &RunLog) -> CompareReport {
    let max_cost_gap = a.records.iter().zip(&b.records).map(|(x, y)| (x.cost_cum - y.cost_cum).abs()).fold(0.0, f64::max);
    CompareReport {
        final_cost_A: a.final_cost(),
        final_cost_B: b.final_cost(),
        max_cost_gap,
        mean_solve_us_A: a.mean_solve_us(),
        mean_solve_us_B: b.mean_solve_us(),
    }
}

/// `compare`: both runs must share steps, seed and disturbance set, so they
/// see the same disturbance stream. The report is written even when a run
/// is infeasible; the exit code is then 3.
pub fn cmd_compare(a: &RunConfig, b: &RunConfig) -> Result<CompareReport, CliError> {
    if a.steps != b.steps || a.seed != b.seed || a.seeds.is_some() || b.seeds.is_some() || a.disturbance != b.disturbance {
        return Err(CliError::Usage("compared runs need the same steps, a single shared seed and the same disturbance mode".into()));
    }
    let (ba, bb) = (bundle_for(a)?, bundle_for(b)?);
    require_certified(&ba)?;
    require_certified(&bb)?;
    if ba.system.w != bb.system.w {
        return Err(CliError::Usage("compared runs need the same disturbance set".into()));
    }
    let la = run_bundle(&ba, a.controller, a.steps, a.seed, a.disturbance)?;
    let lb = run_bundle(&bb, b.controller, b.steps, b.seed, b.disturbance)?;
    let report = compare_logs(&la, &lb);
    let text = serde_json::to_string_pretty(&report)?;
    write(&a.out_dir().join("compare.json"), &text)?;
    println!("{text}");
    for l in [&la, &lb] {
        if let Some(step) = l.infeasible_step {
            return Err(CliError::Infeasible { seed: l.seed, step });
        }
    }
    Ok(report)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Design(args) => cmd_design(args),
        Command::Run(args) => cmd_run(&args.config()?).map(|_| ()),
        Command::Compare(args) => {
            let (a, b) = args.configs()?;
            cmd_compare(&a, &b).map(|_| ())
        }
    }
}

/// Parse `args`, execute, report errors on stderr and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
