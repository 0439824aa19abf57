//! Command-line front end: scenario loading, command dispatch and reports.

pub mod probe;
pub mod report;
pub mod scenario;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;
use srf_core::curvature::{
    check_bochner, check_reverse_poincare, verify_srf, BochnerOptions, SampleOptions, VerificationReport, VerifyOptions,
};
use srf_core::heat::{propagate, propagate_dual, HeatOptions, HeatSolution};
use srf_core::schedule::Params;
use srf_core::transport::{dual_w2_lower, geodesic, primal_w2, DualOptions, PrimalOptions};
use srf_core::{validate_flow, Error};

use report::{exit_code_for, RunReport, ScenarioInfo, Table, Timing, EXIT_INPUT, EXIT_NUMERICAL, EXIT_PASS};
use scenario::{Scenario, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "srf", version, about = "Heat flow, transport and super-Ricci-flow checks on singular time-dependent Markov chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file, `builtin:NAME`, or a bare builtin name.
    #[arg(long)]
    pub scenario: String,
    /// Builtin scenario parameter, `KEY=VALUE`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Violation tolerance, in the units of each check's margin.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Grid size: time points for `bochner`, transport steps otherwise.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Sample budget of the sampled checks (multi-starts for `bochner`).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Directory for report.json and tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Worker threads; 1 gives bit-exact reruns. Falls back to SRF_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Record wall-clock time in the report.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Span {
    /// Start time `s`; defaults to the start of the time range.
    #[arg(long)]
    pub from: Option<f64>,
    /// End time `t`; defaults to the end of the time range.
    #[arg(long)]
    pub to: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct Pair {
    /// Initial measure.
    #[arg(long, default_value = "uniform")]
    pub mu: String,
    /// Final measure.
    #[arg(long)]
    pub nu: String,
    /// Time at which the triple is frozen; defaults to the start.
    #[arg(long)]
    pub time: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the conditions on a scenario.
    Validate(Common),
    /// Propagate a function forward, `P_{t,s} ψ`.
    Heat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        span: Span,
        /// Function on the vertex set at `--from`.
        #[arg(long, default_value = "delta:v0")]
        psi: String,
    },
    /// Propagate a measure backward, `P̂_{t,s} σ`.
    DualHeat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        span: Span,
        /// Measure on the vertex set at `--to`.
        #[arg(long, default_value = "uniform")]
        sigma: String,
    },
    /// Transport distance with primal and dual bounds.
    Wdist {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: Pair,
    },
    /// Constant-speed geodesic between two measures.
    Geodesic {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: Pair,
    },
    /// Dynamic Bochner inequality on a time grid.
    Bochner(Common),
    /// All four criteria and the reverse Poincaré inequality.
    Verify(Common),
    /// Reverse Poincaré inequality.
    Poincare(Common),
    /// Write the scenario as a document.
    Export(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Validate(c) | Command::Bochner(c) | Command::Verify(c) | Command::Poincare(c) | Command::Export(c) => c,
            Command::Heat { common, .. } | Command::DualHeat { common, .. } => common,
            Command::Wdist { common, .. } | Command::Geodesic { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Heat { .. } => "heat",
            Command::DualHeat { .. } => "dual-heat",
            Command::Wdist { .. } => "wdist",
            Command::Geodesic { .. } => "geodesic",
            Command::Bochner(_) => "bochner",
            Command::Verify(_) => "verify",
            Command::Poincare(_) => "poincare",
            Command::Export(_) => "export",
        }
    }
}

/// What a command hands back for rendering.
struct Outcome {
    exit: i32,
    verdict: Option<srf_core::curvature::Verdict>,
    reports: Vec<VerificationReport>,
    result: serde_json::Value,
    warnings: Vec<String>,
    tolerances: BTreeMap<String, f64>,
    table: Option<(&'static str, Table)>,
}

impl Outcome {
    fn plain(result: serde_json::Value) -> Self {
        Self { exit: EXIT_PASS, verdict: None, reports: Vec::new(), result, warnings: Vec::new(), tolerances: BTreeMap::new(), table: None }
    }

    fn checks(reports: Vec<VerificationReport>, warnings: Vec<String>) -> Self {
        let verdict = srf_core::curvature::aggregate(reports.clone()).verdict;
        let tolerances = reports.iter().map(|r| (r.criterion.name().to_string(), r.tolerance)).collect();
        Self { exit: exit_code_for(verdict), verdict: Some(verdict), reports, result: json!({}), warnings, tolerances, table: None }
    }
}

/// A failure that ends the run with an exit class.
#[derive(Debug)]
struct Failure {
    exit: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { exit: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT }, message: e.to_string() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure { exit: EXIT_INPUT, message: e.to_string() }
    }
}

fn input(message: impl Into<String>) -> Failure {
    Failure { exit: EXIT_INPUT, message: message.into() }
}

fn parse_params(raw: &[String]) -> Result<Params, Failure> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| input(format!("--param `{kv}`: expected KEY=VALUE")))?;
            let v: f64 = v.parse().map_err(|e| input(format!("--param `{kv}`: {e}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

fn thread_count(flag: Option<usize>) -> Result<usize, Failure> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SRF_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| input(format!("SRF_THREADS=`{s}` is not a thread count")))?,
            Err(_) => 0,
        },
    };
    Ok(if n == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { n })
}

fn heat_options() -> HeatOptions {
    HeatOptions::default()
}

fn span(sc: &Scenario, s: &Span) -> Result<(f64, f64), Failure> {
    let (t0, t1) = sc.flow.time_range();
    let (a, b) = (s.from.unwrap_or(t0), s.to.unwrap_or(t1));
    if !(a <= b) {
        return Err(input(format!("--from {a} must not exceed --to {b}")));
    }
    Ok((a, b))
}

fn trajectory(sol: &HeatSolution, with_mass: bool) -> Table {
    let mut table = Table { extra: with_mass.then(|| "mass".to_string()), rows: Vec::new() };
    for seg in &sol.segments {
        for (t, v) in seg.times.iter().zip(&seg.values) {
            let mass = with_mass.then(|| v.sum());
            for (x, label) in seg.states.iter().enumerate() {
                table.rows.push((*t, label.clone(), v[x], mass));
            }
        }
    }
    table
}

fn heat_result(sol: &HeatSolution) -> serde_json::Value {
    let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    let boundaries: Vec<serde_json::Value> = sol
        .boundaries
        .iter()
        .map(|b| {
            json!({
                "time": b.time,
                "transition": b.transition,
                "left_limit": b.left_limit.as_ref().map(vec),
                "value": vec(&b.value),
                "right_limit": b.right_limit.as_ref().map(vec),
            })
        })
        .collect();
    json!({
        "from": sol.s,
        "to": sol.t,
        "states": sol.states,
        "value": vec(&sol.value),
        "mass": sol.value.sum(),
        "boundaries": boundaries,
        "projection_error": sol.diagnostics.projection_error(),
        "diagnostics": sol.diagnostics,
    })
}

fn frozen_pair(sc: &Scenario, pair: &Pair) -> Result<(f64, srf_core::MarkovTriple, DVector<f64>, DVector<f64>), Failure> {
    let t = pair.time.unwrap_or(sc.flow.time_range().0);
    let point = sc.flow.eval_at(t)?;
    let states = point.triple.labels().to_vec();
    let pi = point.triple.pi().clone();
    let mu = probe::measure(&pair.mu, &states, &pi, &sc.probes).map_err(|e| input(format!("--mu: {e}")))?;
    let nu = probe::measure(&pair.nu, &states, &pi, &sc.probes).map_err(|e| input(format!("--nu: {e}")))?;
    Ok((t, point.triple, mu, nu))
}

fn execute(cmd: &Command, sc: &Scenario) -> Result<Outcome, Failure> {
    let common = cmd.common();
    let seed = common.seed;
    match cmd {
        Command::Validate(_) => {
            let rep = validate_flow(&sc.flow);
            let mut out = Outcome::plain(serde_json::to_value(&rep).expect("validation reports serialize"));
            out.warnings = rep.warnings().iter().map(|c| format!("{} at {}: {}", c.condition, c.location, c.detail)).collect();
            out.exit = if rep.passed() { EXIT_PASS } else { EXIT_INPUT };
            Ok(out)
        }
        Command::Export(_) => Ok(Outcome::plain(serde_json::to_value(scenario::export(&sc.flow, &sc.probes)).expect("documents serialize"))),
        Command::Heat { span: s, psi, .. } => {
            let (a, b) = span(sc, s)?;
            let states = sc.flow.states_at(a)?;
            let f = probe::function(psi, &states, &sc.probes).map_err(|e| input(format!("--psi: {e}")))?;
            let sol = propagate(&sc.flow, a, b, &f, &heat_options())?;
            let mut out = Outcome::plain(heat_result(&sol));
            out.table = Some(("trajectory.csv", trajectory(&sol, false)));
            Ok(out)
        }
        Command::DualHeat { span: s, sigma, .. } => {
            let (a, b) = span(sc, s)?;
            let point = sc.flow.eval_at(b)?;
            let states = point.triple.labels().to_vec();
            let m = probe::measure(sigma, &states, point.triple.pi(), &sc.probes).map_err(|e| input(format!("--sigma: {e}")))?;
            let sol = propagate_dual(&sc.flow, a, b, &m, &heat_options())?;
            let mut out = Outcome::plain(heat_result(&sol));
            out.table = Some(("trajectory.csv", trajectory(&sol, true)));
            Ok(out)
        }
        Command::Wdist { pair, .. } => {
            let (t, triple, mu, nu) = frozen_pair(sc, pair)?;
            let k = common.grid.unwrap_or(64);
            let dual_opts = DualOptions::default();
            let primal = primal_w2(&triple, &mu, &nu, k, &PrimalOptions::default())?;
            let dual = dual_w2_lower(&triple, &mu, &nu, k, &dual_opts)?;
            let gap = if primal.value > 0.0 { (primal.value - dual.value) / primal.value } else { 0.0 };
            Ok(Outcome::plain(json!({
                "time": t,
                "grid": k,
                "dual_refine": dual_opts.refine,
                "primal": primal.value,
                "dual": dual.value,
                "relative_gap": gap,
                "continuity_residual": primal.continuity_residual,
                "certified_violation": dual.witness.certified_violation,
            })))
        }
        Command::Geodesic { pair, .. } => {
            let (t, triple, mu, nu) = frozen_pair(sc, pair)?;
            let k = common.grid.unwrap_or(64);
            let g = geodesic(&triple, &mu, &nu, k, &PrimalOptions::default())?;
            let mut table = Table::default();
            for j in 0..=g.path.k() {
                let node = g.path.node(j);
                for (x, label) in triple.labels().iter().enumerate() {
                    table.rows.push((j as f64 / k as f64, label.clone(), node[x], None));
                }
            }
            let mut out = Outcome::plain(json!({
                "time": t,
                "grid": k,
                "distance": g.value,
                "speed_deviation": g.speed_deviation,
                "mixed_endpoints": g.mixed_endpoints,
            }));
            out.table = Some(("path.csv", table));
            Ok(out)
        }
        Command::Bochner(_) => {
            let d = BochnerOptions::default();
            let opts = BochnerOptions {
                times: common.grid.unwrap_or(d.times),
                starts: common.samples.unwrap_or(d.starts),
                tol: common.tol.unwrap_or(d.tol),
                seed,
                ..d
            };
            Ok(Outcome::checks(vec![check_bochner(&sc.flow, &opts)], Vec::new()))
        }
        Command::Poincare(_) => {
            let d = SampleOptions::default();
            let opts = SampleOptions { samples: common.samples.unwrap_or(d.samples), tol: common.tol.unwrap_or(d.tol), seed, ..d };
            Ok(Outcome::checks(vec![check_reverse_poincare(&sc.flow, &opts)], Vec::new()))
        }
        Command::Verify(_) => {
            let mut o = VerifyOptions::default().with_seed(seed);
            if let Some(n) = common.samples {
                o.gradient.samples = n;
                o.transport.samples = n;
                o.convexity.samples = n;
                o.poincare.samples = n;
            }
            if let Some(k) = common.grid {
                o.transport.grid = k;
                o.convexity.grid = k;
            }
            if let Some(tol) = common.tol {
                o.bochner.tol = tol;
                o.gradient.tol = tol;
                o.transport.tol = tol;
                o.convexity.tol = tol;
                o.poincare.tol = tol;
            }
            let rep = verify_srf(&sc.flow, &o);
            let mut out = Outcome::checks(rep.reports.clone(), rep.warnings.clone());
            out.result = json!({ "consistent": rep.consistent });
            Ok(out)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Run a parsed command; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(&cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit
        }
    }
}

fn run_inner(cmd: &Command) -> Result<i32, Failure> {
    let common = cmd.common();
    let start = Instant::now();
    let params = parse_params(&common.params)?;
    let threads = thread_count(common.threads)?;
    let sc = match scenario::load(&common.scenario, &params) {
        Ok(sc) => sc,
        // `validate` reports the failed checks instead of refusing the file.
        Err(ScenarioError::Validation { .. }) if matches!(cmd, Command::Validate(_)) => scenario::load_unchecked(&common.scenario)?,
        Err(e) => return Err(e.into()),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| input(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| execute(cmd, &sc))?;

    let report = RunReport {
        command: cmd.name().to_string(),
        scenario: ScenarioInfo { name: sc.flow.name.clone(), source: sc.source.clone(), digest: sc.digest() },
        seed: common.seed,
        threads,
        tolerances: outcome.tolerances,
        verdict: outcome.verdict,
        reports: outcome.reports,
        result: outcome.result,
        warnings: outcome.warnings,
        timing: common.timing.then(|| Timing { wall_seconds: start.elapsed().as_secs_f64() }),
        exit_code: outcome.exit,
    };
    let json_text = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
    if let Some(dir) = &common.out {
        write_file(dir, "report.json", &json_text)?;
        if let Some((name, table)) = &outcome.table {
            write_file(dir, name, &table.to_csv())?;
        }
        if let Command::Export(_) = cmd {
            write_file(dir, "scenario.json", &(serde_json::to_string_pretty(&report.result).expect("documents serialize") + "\n"))?;
        }
    }
    let stdout = match (common.format, cmd) {
        (Format::Json, Command::Export(_)) | (Format::Text, Command::Export(_)) => {
            serde_json::to_string_pretty(&report.result).expect("documents serialize") + "\n"
        }
        (Format::Json, _) => json_text,
        (Format::Text, _) => report::to_text(&report),
        (Format::Csv, _) => match &outcome.table {
            Some((_, table)) => table.to_csv(),
            None if !report.reports.is_empty() => report::verification_csv(&report.reports),
            None => return Err(input(format!("`{}` has no table output; use --format json or text", report.command))),
        },
    };
    // A closed pipe (`srf ... | head`) is not an error of the run.
    let mut out = std::io::stdout().lock();
    match out.write_all(stdout.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(input(format!("stdout: {e}"))),
        _ => Ok(report.exit_code),
    }
}

/// Parse arguments and run; clap prints usage errors with exit class 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_PASS
            }
        }
    }
}
