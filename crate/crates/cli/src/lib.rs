//! Batch frontend: power flow, OPF/SCOPF solves and backend benchmarks.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 power flow
//! divergence, 4 solver failure.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridopt::grid_model::{
    all_line_contingencies, build_admittance, parse_matpower, screen_contingencies, Contingency, GridCase,
};
use gridopt::ipm_core::{iteration_csv, solve, Backend, IpmOptions, IpmResult};
use gridopt::kkt_linalg::LocalSchurMethod;
use gridopt::opf_problems::{build_opf, build_scopf, OpfProblem};
use gridopt::powerflow::{line_flow_h, newton_pf, rated_ends, setpoint_controls, PfPartition, Side};
use gridopt::reduced_space::{reduced_solve, ReducedConfig, ReducedProblem};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PF_DIVERGED: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "gridopt", version, about = "AC OPF and security-constrained OPF solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the power flow at the case's stored setpoints.
    Pf(PfArgs),
    /// Solve an OPF or SCOPF and write a results report.
    Solve(SolveArgs),
    /// Time the same problem across KKT backends and worker counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct PfArgs {
    /// MATPOWER case file.
    #[arg(long)]
    pub case: PathBuf,
    /// Mismatch tolerance (per unit).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Opf,
    Scopf,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Direct,
    DirectReduced,
    SchurStd,
    SchurAug,
}

impl BackendArg {
    pub fn backend(self, workers: usize) -> Backend {
        match self {
            BackendArg::Direct => Backend::DirectFull,
            BackendArg::DirectReduced => Backend::DirectSlackReduced,
            BackendArg::SchurStd => Backend::SchurArrowhead {
                method: LocalSchurMethod::Backsolve,
                workers,
            },
            BackendArg::SchurAug => Backend::SchurArrowhead {
                method: LocalSchurMethod::AugmentedPartial,
                workers,
            },
        }
    }

    pub fn is_schur(self) -> bool {
        matches!(self, BackendArg::SchurStd | BackendArg::SchurAug)
    }
}

impl fmt::Display for BackendArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().unwrap().get_name())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().unwrap().get_name())
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// MATPOWER case file.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Opf)]
    pub mode: Mode,
    /// Outaged branches: 1-based ids ("2,5"), "all", or "screened:all".
    #[arg(long)]
    pub contingencies: Option<String>,
    /// Reactive-limit violation allowed by screening, in MVAr.
    #[arg(long, default_value_t = 10.0)]
    pub q_viol_tol: f64,
    /// Solver option override, repeatable (e.g. --opt tol=1e-6 --opt barrier=monotone).
    /// Reduced mode also accepts smoothing, lump_threshold, pf_tol and pf_max_iter.
    #[arg(long = "opt", value_name = "KEY=VALUE")]
    pub opts: Vec<String>,
    /// Lump line limits per rating class (reduced mode).
    #[arg(long)]
    pub lump: bool,
    /// Seed recorded with the results; the solvers themselves are deterministic.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = BackendArg::Direct)]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Results JSON; printed to stdout when omitted.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Per-iteration CSV log.
    #[arg(long)]
    pub iterations: Option<PathBuf>,
    /// Relative distance to a limit under which a constraint is reported as binding.
    #[arg(long, default_value_t = 1e-4)]
    pub binding_tol: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Comma-separated backends.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "direct,direct-reduced,schur-std,schur-aug")]
    pub backends: Vec<BackendArg>,
    /// Comma-separated worker counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers: Vec<usize>,
    /// Benchmark CSV; printed to stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let out = match &cli.command {
        Command::Pf(a) => cmd_pf(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn load_case(path: &PathBuf) -> Result<GridCase, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let grid = parse_matpower(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    grid.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(grid)
}

/// Resolves a contingency spec against the grid.
pub fn parse_contingencies(grid: &GridCase, spec: &str, q_viol_tol: f64) -> Result<Vec<Contingency>, CliError> {
    match spec.trim() {
        "all" => Ok(all_line_contingencies(grid)),
        "screened:all" => Ok(screen_contingencies(grid, &all_line_contingencies(grid), q_viol_tol)),
        ids => ids
            .split(',')
            .map(|s| {
                let id: usize = s
                    .trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("bad contingency id '{s}'")))?;
                if id == 0 || id > grid.n_l() {
                    return Err(CliError::config(format!("branch id {id} out of range 1..={}", grid.n_l())));
                }
                Ok(Contingency::line(id - 1))
            })
            .collect(),
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::config(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_pf(args: &PfArgs) -> Result<i32, CliError> {
    let grid = load_case(&args.case)?;
    let y = build_admittance(&grid);
    let part = PfPartition::new(&grid);
    let u = setpoint_controls(&grid, &part);
    let sol = match newton_pf(&grid, &y, &u, args.tol, args.max_iter) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("power flow failed: {e}");
            return Ok(EXIT_PF_DIVERGED);
        }
    };
    println!("{:>6} {:>10} {:>10}", "bus", "vm_pu", "va_deg");
    for (i, b) in grid.buses.iter().enumerate() {
        println!("{:>6} {:>10.6} {:>10.4}", b.id, sol.state.vm[i], sol.state.va[i].to_degrees());
    }
    println!("iterations: {}", sol.iterations);
    println!("mismatch_inf_norm: {:.3e}", sol.residuals.last().copied().unwrap_or(0.0));
    Ok(EXIT_OK)
}

/// Solver settings shared by `solve` and `bench`.
struct Setup {
    grid: GridCase,
    contingencies: Vec<Contingency>,
    options: IpmOptions,
    reduced: ReducedConfig,
}

fn setup(p: &ProblemArgs) -> Result<Setup, CliError> {
    let grid = load_case(&p.case)?;
    let contingencies = match (&p.contingencies, p.mode) {
        (Some(_), Mode::Opf) => return Err(CliError::config("--contingencies needs --mode scopf or reduced")),
        (Some(s), _) => parse_contingencies(&grid, s, p.q_viol_tol)?,
        (None, Mode::Scopf) => return Err(CliError::config("--mode scopf needs --contingencies")),
        (None, _) => Vec::new(),
    };
    if p.lump && p.mode != Mode::Reduced {
        return Err(CliError::config("--lump applies to --mode reduced only"));
    }
    let mut options = IpmOptions::default();
    let mut reduced = ReducedConfig {
        lump: p.lump,
        ..Default::default()
    };
    for kv in &p.opts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--opt expects key=value, got '{kv}'")))?;
        let num = || v.parse::<f64>().map_err(|_| CliError::config(format!("{k}: '{v}' is not a number")));
        match k {
            "smoothing" => reduced.smoothing = num()?,
            "lump_threshold" => reduced.threshold = num()?,
            "pf_tol" => reduced.pf_tol = num()?,
            "pf_max_iter" => {
                reduced.pf_max_iter = v
                    .parse()
                    .map_err(|_| CliError::config(format!("{k}: '{v}' is not an integer")))?
            }
            _ => options.set(k, v).map_err(|e| CliError::config(e.to_string()))?,
        }
    }
    options.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(Setup {
        grid,
        contingencies,
        options,
        reduced,
    })
}

/// Network state of one scenario in grid units.
struct Snapshot {
    vm: Vec<f64>,
    va: Vec<f64>,
    /// Per generator of the grid, per unit; zero when out of service.
    pg: Vec<f64>,
    qg: Vec<f64>,
}

struct Outcome {
    result: IpmResult,
    snapshots: Vec<(String, GridCase, Snapshot)>,
}

fn opf_snapshots(p: &OpfProblem, x: &[f64]) -> Vec<(String, GridCase, Snapshot)> {
    (0..p.n_scenarios())
        .map(|c| {
            let st = p.scenario_state(x, c);
            let grid = p.scenario_grid(c).clone();
            let mut pg = vec![0.0; grid.n_g()];
            let mut qg = vec![0.0; grid.n_g()];
            for (k, &g) in p.generators().iter().enumerate() {
                pg[g] = st.pg[k];
                qg[g] = st.qg[k];
            }
            let label = p.contingency(c).map(|c| c.label.clone()).unwrap_or_else(|| "base".into());
            (label, grid, Snapshot { vm: st.vm, va: st.va, pg, qg })
        })
        .collect()
}

fn run_problem(s: &Setup, mode: Mode, backend: BackendArg, workers: usize) -> Result<Outcome, CliError> {
    if workers == 0 {
        return Err(CliError::config("--workers must be positive"));
    }
    match mode {
        Mode::Opf | Mode::Scopf => {
            let p = if mode == Mode::Opf {
                build_opf(&s.grid)
            } else {
                build_scopf(&s.grid, &s.contingencies)
            }
            .map_err(|e| CliError::config(e.to_string()))?;
            let result = solve(&p, &s.options, &backend.backend(workers));
            let snapshots = opf_snapshots(&p, &result.iterate.x);
            Ok(Outcome { result, snapshots })
        }
        Mode::Reduced => {
            if backend.is_schur() {
                return Err(CliError::config("--mode reduced solves its small KKT system directly; use direct or direct-reduced"));
            }
            let cfg = ReducedConfig {
                workers,
                ..s.reduced.clone()
            };
            let rp = ReducedProblem::new(&s.grid, &s.contingencies, cfg).map_err(|e| CliError::config(e.to_string()))?;
            let sol = reduced_solve(&rp, &s.options, &backend.backend(workers))
                .map_err(|e| CliError::config(e.to_string()))?;
            let mut grids = vec![("base".to_string(), s.grid.clone())];
            for c in &s.contingencies {
                let g = gridopt::grid_model::apply_contingency(&s.grid, c).map_err(|e| CliError::config(e.to_string()))?;
                grids.push((c.label.clone(), g));
            }
            let snapshots = grids
                .into_iter()
                .zip(sol.states)
                .map(|((label, grid), st)| {
                    (
                        label,
                        grid,
                        Snapshot {
                            vm: st.vm,
                            va: st.va,
                            pg: st.pg,
                            qg: st.qg,
                        },
                    )
                })
                .collect();
            Ok(Outcome {
                result: sol.ipm,
                snapshots,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusResult {
    pub id: u32,
    pub vm: f64,
    pub va_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenResult {
    pub index: usize,
    pub bus_id: u32,
    pub pg_mw: f64,
    pub qg_mvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingConstraint {
    pub scenario: String,
    /// One of line_flow, vm_max, vm_min, pg_max, pg_min, qg_max, qg_min.
    pub kind: String,
    /// Branch id with end ("3:from"), bus id, or generator index.
    pub element: String,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsReport {
    pub case: String,
    pub mode: String,
    pub backend: String,
    pub workers: usize,
    pub seed: u64,
    pub status: String,
    pub objective: f64,
    pub iterations: usize,
    pub final_error: f64,
    pub contingencies: Vec<String>,
    pub buses: Vec<BusResult>,
    pub generators: Vec<GenResult>,
    pub binding_constraints: Vec<BindingConstraint>,
}

const STATUSES: [&str; 5] = ["optimal", "acceptable", "max_iter", "restoration_failure", "step_failure"];
const BINDING_KINDS: [&str; 7] = ["line_flow", "vm_max", "vm_min", "pg_max", "pg_min", "qg_max", "qg_min"];

/// Structural checks on a results report.
pub fn validate_report(r: &ResultsReport) -> Result<(), String> {
    if !STATUSES.contains(&r.status.as_str()) {
        return Err(format!("unknown status '{}'", r.status));
    }
    if !["opf", "scopf", "reduced"].contains(&r.mode.as_str()) {
        return Err(format!("unknown mode '{}'", r.mode));
    }
    if !r.objective.is_finite() || !r.final_error.is_finite() {
        return Err("objective and final_error must be finite".into());
    }
    if r.buses.is_empty() {
        return Err("no buses".into());
    }
    if r.buses.iter().any(|b| !(b.vm > 0.0) || !b.va_deg.is_finite()) {
        return Err("bus voltages must be positive and finite".into());
    }
    if r.generators.iter().any(|g| !g.pg_mw.is_finite() || !g.qg_mvar.is_finite()) {
        return Err("generator dispatch must be finite".into());
    }
    let ids: Vec<u32> = r.buses.iter().map(|b| b.id).collect();
    if r.generators.iter().any(|g| !ids.contains(&g.bus_id)) {
        return Err("generator on an unknown bus".into());
    }
    for b in &r.binding_constraints {
        if !BINDING_KINDS.contains(&b.kind.as_str()) {
            return Err(format!("unknown binding kind '{}'", b.kind));
        }
        if b.scenario != "base" && !r.contingencies.contains(&b.scenario) {
            return Err(format!("unknown scenario '{}'", b.scenario));
        }
    }
    Ok(())
}

/// Parses and validates a results JSON document.
pub fn parse_report(text: &str) -> Result<ResultsReport, String> {
    let r: ResultsReport = serde_json::from_str(text).map_err(|e| e.to_string())?;
    validate_report(&r)?;
    Ok(r)
}

fn near_upper(value: f64, limit: f64, tol: f64) -> bool {
    limit.is_finite() && value >= limit - tol * limit.abs().max(1.0)
}

fn near_lower(value: f64, limit: f64, tol: f64) -> bool {
    limit.is_finite() && value <= limit + tol * limit.abs().max(1.0)
}

fn binding_constraints(label: &str, grid: &GridCase, st: &Snapshot, tol: f64) -> Vec<BindingConstraint> {
    let mut out = Vec::new();
    let mut push = |kind: &str, element: String, value: f64, limit: f64| {
        out.push(BindingConstraint {
            scenario: label.to_string(),
            kind: kind.to_string(),
            element,
            value,
            limit,
        })
    };
    let y = build_admittance(grid);
    let flows = line_flow_h(grid, &y, &st.vm, &st.va);
    for (k, &(l, side)) in rated_ends(grid).iter().enumerate() {
        let rate = grid.branches[l].rate_a;
        let s = (flows.h[k] + grid.rate_pu(l).powi(2)).max(0.0).sqrt() * grid.base_mva;
        if near_upper(s, rate, tol) {
            let end = if side == Side::From { "from" } else { "to" };
            push("line_flow", format!("{}:{end}", l + 1), s, rate);
        }
    }
    for (i, b) in grid.buses.iter().enumerate() {
        if near_upper(st.vm[i], b.vmax, tol) {
            push("vm_max", b.id.to_string(), st.vm[i], b.vmax);
        }
        if near_lower(st.vm[i], b.vmin, tol) {
            push("vm_min", b.id.to_string(), st.vm[i], b.vmin);
        }
    }
    for (k, g) in grid.generators.iter().enumerate().filter(|(_, g)| g.in_service) {
        let (p, q) = (st.pg[k] * grid.base_mva, st.qg[k] * grid.base_mva);
        if near_upper(p, g.pmax, tol) {
            push("pg_max", k.to_string(), p, g.pmax);
        }
        if near_lower(p, g.pmin, tol) {
            push("pg_min", k.to_string(), p, g.pmin);
        }
        if near_upper(q, g.qmax, tol) {
            push("qg_max", k.to_string(), q, g.qmax);
        }
        if near_lower(q, g.qmin, tol) {
            push("qg_min", k.to_string(), q, g.qmin);
        }
    }
    out
}

fn build_report(a: &SolveArgs, s: &Setup, o: &Outcome) -> ResultsReport {
    let (_, grid, nominal) = &o.snapshots[0];
    let buses = grid
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| BusResult {
            id: b.id,
            vm: nominal.vm[i],
            va_deg: nominal.va[i].to_degrees(),
        })
        .collect();
    let generators = grid
        .generators
        .iter()
        .enumerate()
        .filter(|(_, g)| g.in_service)
        .map(|(k, g)| GenResult {
            index: k,
            bus_id: grid.buses[g.bus].id,
            pg_mw: nominal.pg[k] * grid.base_mva,
            qg_mvar: nominal.qg[k] * grid.base_mva,
        })
        .collect();
    let binding_constraints = o
        .snapshots
        .iter()
        .flat_map(|(label, g, st)| binding_constraints(label, g, st, a.binding_tol))
        .collect();
    ResultsReport {
        case: a.problem.case.display().to_string(),
        mode: a.problem.mode.to_string(),
        backend: a.backend.to_string(),
        workers: a.workers,
        seed: a.problem.seed,
        status: o.result.status.as_str().to_string(),
        objective: o.result.objective,
        iterations: o.result.iterations,
        final_error: o.result.error,
        contingencies: s.contingencies.iter().map(|c| c.label.clone()).collect(),
        buses,
        generators,
        binding_constraints,
    }
}

pub fn cmd_solve(a: &SolveArgs) -> Result<i32, CliError> {
    let s = setup(&a.problem)?;
    let o = run_problem(&s, a.problem.mode, a.backend, a.workers)?;
    let report = build_report(a, &s, &o);
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::config(e.to_string()))?;
    json.push('\n');
    write_or_print(a.results.as_ref(), &json)?;
    if let Some(p) = &a.iterations {
        write_or_print(Some(p), &iteration_csv(&o.result.log))?;
    }
    eprintln!(
        "{} objective={:.6} iterations={}",
        report.status, report.objective, report.iterations
    );
    Ok(if o.result.status.is_success() { EXIT_OK } else { EXIT_SOLVER })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    pub workers: usize,
    pub total_s: f64,
    pub kkt_s: f64,
    /// Factorization time; for Schur backends the local contributions plus
    /// the Schur complement.
    pub schur_assembly_s: f64,
    pub solve_s: f64,
    pub iterations: usize,
}

pub fn cmd_bench(a: &BenchArgs) -> Result<i32, CliError> {
    let s = setup(&a.problem)?;
    if a.workers.is_empty() || a.backends.is_empty() {
        return Err(CliError::config("need at least one backend and worker count"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for &backend in &a.backends {
        if a.problem.mode == Mode::Reduced && backend.is_schur() {
            continue;
        }
        for &workers in &a.workers {
            let t = Instant::now();
            let o = run_problem(&s, a.problem.mode, backend, workers)?;
            let st = &o.result.stats;
            w.serialize(BenchRow {
                backend: backend.to_string(),
                workers,
                total_s: t.elapsed().as_secs_f64().max(st.total_s),
                kkt_s: st.kkt_s,
                schur_assembly_s: st.factor_s,
                solve_s: st.solve_s,
                iterations: o.result.iterations,
            })
            .map_err(|e| CliError::config(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_or_print(a.output.as_ref(), &String::from_utf8_lossy(&bytes))?;
    Ok(EXIT_OK)
}
