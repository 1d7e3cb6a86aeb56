//! Command-line front end: configuration, orchestration and report files.
//!
//! Every subcommand reads one TOML configuration, writes CSV and JSON
//! artifacts into the output directory and maps the outcome to an exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, Perturbation};
use crate::diagnostics::{self, DichotomyThresholds, MtwConfig, MtwEstimate};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowReport, PotentialState, Problem, QuadraticBase, Verdict};
use crate::geometry::{build_grid, normalize_densities, DensityField, DensitySpec, DomainSpec, NodeClass};
use crate::initdata::{self, ContinuationConfig};
use crate::oracle::{self, Candidate, OracleMetrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BREACH: i32 = 2;
pub const EXIT_CONTINUATION: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;
pub const EXIT_FLOW: i32 = 5;

/// Largest lattice resolution per axis accepted from a config.
pub const MAX_RESOLUTION_1D: usize = 4097;
pub const MAX_RESOLUTION_2D: usize = 257;

#[derive(Debug, Parser)]
#[command(name = "parot", version, about = "Parabolic optimal transport flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for the randomized samplers (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Lattice nodes per axis (overrides `resolution`).
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Steady state, continuation, monitored flow and verification.
    Pipeline,
    /// Steady state for the configured cost.
    Steady,
    /// Initial data for the configured cost, with its audit.
    Init,
    /// Initial data followed by the flow.
    Flow,
    /// σ_MTW estimate and dichotomy thresholds.
    Mtw,
    /// Roots and bounds of s − σsⁿ − C.
    Poly,
    /// Re-check a potential written by `flow` or `pipeline` against the oracles.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pipeline => "pipeline",
            Command::Steady => "steady",
            Command::Init => "init",
            Command::Flow => "flow",
            Command::Mtw => "mtw",
            Command::Poly => "poly",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    #[default]
    Quadratic,
    Power { p: f64 },
    PerturbedQuadratic { eta: Perturbation },
}

impl CostSpec {
    pub fn build(&self) -> Result<CostModel> {
        match self {
            CostSpec::Quadratic => Ok(CostModel::Quadratic),
            CostSpec::Power { p } => CostModel::power(*p),
            CostSpec::PerturbedQuadratic { eta } => Ok(CostModel::PerturbedQuadratic(eta.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Cap on source × target node pairs for the discrete transport oracle.
    pub pair_cap: usize,
    /// Node pairs examined by the strict c-convexity audit.
    pub ic_pairs: usize,
    /// Potential CSV consumed by `verify`.
    pub input: Option<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            pair_cap: oracle::DEFAULT_PAIR_CAP,
            ic_pairs: 10_000,
            input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyConfig {
    pub n: usize,
    pub sigma: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
    pub source: DomainSpec,
    pub target: DomainSpec,
    #[serde(default)]
    pub source_density: DensitySpec,
    #[serde(default)]
    pub target_density: DensitySpec,
    #[serde(default)]
    pub cost: CostSpec,
    /// Reference cost c₀ whose steady state starts the continuation.
    #[serde(default)]
    pub reference_cost: CostSpec,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub mtw: MtwConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub poly: Option<PolyConfig>,
}

fn default_resolution() -> usize {
    64
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are taken relative to the config file
        let dir = path.parent().unwrap_or(Path::new("."));
        for d in [&mut cfg.source_density, &mut cfg.target_density] {
            if let DensitySpec::Csv { path } = d {
                if Path::new(path.as_str()).is_relative() {
                    *path = dir.join(path.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        if let Some(input) = &mut cfg.verify.input {
            if Path::new(input.as_str()).is_relative() {
                *input = dir.join(input.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        let n = self.source.dim();
        if n != self.target.dim() {
            return Err(Error::Config("source and target dimensions differ".into()));
        }
        let cap = if n == 1 { MAX_RESOLUTION_1D } else { MAX_RESOLUTION_2D };
        if self.resolution < 4 || self.resolution > cap {
            return Err(Error::Config(format!("resolution must lie in [4, {cap}] for n = {n}")));
        }
        for d in [&self.source_density, &self.target_density] {
            if let DensitySpec::Csv { path } = d {
                if !Path::new(path).is_file() {
                    return Err(Error::Config(format!("density file {path} does not exist")));
                }
            }
        }
        self.cost.build()?;
        self.reference_cost.build()?;
        self.flow.validate()?;
        self.continuation.validate()?;
        Ok(())
    }
}

/// Grids, densities and both costs built from a config.
pub struct Setup {
    pub problem: Problem,
    pub reference: CostModel,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let src = Arc::new(build_grid(&cfg.source, cfg.resolution)?);
    let tgt = Arc::new(build_grid(&cfg.target, cfg.resolution)?);
    let rho = DensityField::from_spec(src, &cfg.source_density)?;
    let rho_star = DensityField::from_spec(tgt, &cfg.target_density)?;
    let (rho, rho_star) = normalize_densities(&rho, &rho_star)?;
    let problem = Problem::new(cfg.cost.build()?, rho, rho_star)?;
    Ok(Setup {
        problem,
        reference: cfg.reference_cost.build()?,
    })
}

/// Exit code for an error escaping a subcommand.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Dimension(_) | Error::Density(_) => {
            EXIT_CONFIG
        }
        Error::Continuation { .. } => EXIT_CONTINUATION,
        Error::Coverage { .. } | Error::OracleInapplicable(_) => EXIT_VERIFICATION,
        _ => EXIT_FLOW,
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_flow_rows(dir: &Path, report: &FlowReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("flow.csv"))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per active node: index, coordinates, class, u, ∇u, T(x) and G.
pub fn write_potential(path: &Path, state: &PotentialState) -> Result<()> {
    let n = state.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string()];
    header.extend((0..n).map(|k| format!("x{k}")));
    header.push("class".into());
    header.push("u".into());
    header.extend((0..n).map(|k| format!("du{k}")));
    header.extend((0..n).map(|k| format!("y{k}")));
    header.push("g".into());
    w.write_record(&header)?;
    let z = state.zero_mean();
    for i in state.grid.active_indices() {
        let mut rec = vec![i.to_string()];
        rec.extend(state.grid.nodes[i].iter().map(|v| v.to_string()));
        rec.push(
            match state.grid.class[i] {
                NodeClass::Interior => "interior",
                NodeClass::Boundary => "boundary",
                NodeClass::Exterior => "exterior",
            }
            .into(),
        );
        rec.push(z.u_at(i).to_string());
        rec.extend(state.grid.nodes[i].iter().enumerate().map(|(k, _)| state.grad[i][k].to_string()));
        match &state.image[i] {
            Some(y) => rec.extend(y.iter().map(|v| v.to_string())),
            None => rec.extend((0..n).map(|_| "NaN".to_string())),
        }
        rec.push(state.g[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a potential CSV back as nodal values on `problem`'s source grid.
/// Every active node must appear once with matching coordinates.
pub fn read_potential(path: &Path, problem: &Problem) -> Result<Vec<f64>> {
    let grid = problem.source();
    let n = grid.dim();
    let mut r = csv::Reader::from_path(path)?;
    let mut v = vec![0.0; grid.len()];
    let mut seen = vec![false; grid.len()];
    let parse = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| Error::Config(format!("bad number {s:?} in {}", path.display()))) };
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 * n + 4 {
            return Err(Error::Config(format!("{}: expected {} columns", path.display(), 3 * n + 4)));
        }
        let idx: usize = rec[0].trim().parse().map_err(|_| Error::Config("bad node index".into()))?;
        if idx >= grid.len() || !grid.is_active(idx) || seen[idx] {
            return Err(Error::Config(format!("node {idx} does not match the configured grid")));
        }
        for k in 0..n {
            let x = parse(&rec[1 + k])?;
            if (x - grid.nodes[idx][k]).abs() > 1e-9 * grid.spec.diameter() {
                return Err(Error::Config(format!("node {idx} coordinates do not match the configured grid")));
            }
        }
        v[idx] = parse(&rec[n + 2])?;
        seen[idx] = true;
    }
    if grid.active_indices().iter().any(|&i| !seen[i]) {
        return Err(Error::Config("potential file does not cover the configured grid".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub verdict: Verdict,
    pub steps: usize,
    pub t: f64,
    pub residual: f64,
    pub spread: f64,
    pub boundary_residual: f64,
    pub omega: f64,
    pub monitor: Option<diagnostics::MonitorVerdict>,
    pub min_eig: f64,
    pub mass_err: f64,
}

impl FlowSummary {
    fn of(r: &FlowReport) -> Self {
        let s = &r.final_state;
        Self {
            verdict: r.verdict,
            steps: r.steps,
            t: s.t,
            residual: s.residual_sup(),
            spread: s.residual_spread(),
            boundary_residual: s.boundary_residual(),
            omega: r.omega,
            monitor: r.monitor,
            min_eig: s.min_eig,
            mass_err: s.mass_balance_error(),
        }
    }
}

/// Duality identity tolerance (it holds by construction).
pub const DUALITY_IDENTITY_TOL: f64 = 1e-10;
/// Tolerance on ∇u*(y) + ∇_y c(T⁻¹y, y) by finite differences.
pub const DUALITY_GRADIENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct Verification {
    pub transport: flow::TransportMapReport,
    pub duality: flow::DualityAudit,
    pub oracle: Option<OracleMetrics>,
    /// Why an oracle was not run.
    pub oracle_note: Option<String>,
    pub two_swap_violations: Option<usize>,
    pub passes: bool,
}

/// Map audits, dual potential, duality checks and oracle comparison for a
/// converged state.
pub fn verify_state(problem: &Problem, state: &PotentialState, verify: &VerifyConfig) -> Result<Verification> {
    let transport = flow::transport_map(problem, state)?;
    let dual = flow::dual_potential(problem, state)?;
    let duality = flow::duality_audit(problem, &dual)?;
    let mut note = Vec::new();
    let oracle_map = if state.dim() == 1 {
        match oracle::monotone_rearrangement_1d(&problem.cost, &problem.rho, &problem.rho_star) {
            Ok(m) => Some(m),
            Err(Error::OracleInapplicable(msg)) => {
                note.push(format!("rearrangement: {msg}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let plan = match oracle::discrete_kantorovich(&problem.cost, &problem.rho, &problem.rho_star, verify.pair_cap) {
        Ok(p) => Some(p),
        Err(Error::Size(msg)) => {
            note.push(format!("discrete transport: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };
    let two_swap = match &plan {
        Some(p) => Some(oracle::two_swap_violations(&problem.cost, p, problem.source(), problem.target(), 1e-12)?),
        None => None,
    };
    let candidate = Candidate::from_flow(state, &dual);
    let metrics = oracle::compare_to_oracle(
        &problem.cost,
        &problem.rho,
        &problem.rho_star,
        &candidate,
        oracle_map.as_deref(),
        plan.as_ref(),
    )?;
    let passes = transport.injective
        && transport.contained
        && duality.identity <= DUALITY_IDENTITY_TOL
        && duality.gradient.is_none_or(|g| g <= DUALITY_GRADIENT_TOL)
        && metrics.passes;
    Ok(Verification {
        transport,
        duality,
        oracle: Some(metrics),
        oracle_note: if note.is_empty() { None } else { Some(note.join("; ")) },
        two_swap_violations: two_swap,
        passes,
    })
}

#[derive(Debug, Clone, Serialize)]
struct ThresholdReport {
    sigma: Option<MtwEstimate>,
    thresholds: Option<DichotomyThresholds>,
    initial_omega: Option<diagnostics::InitialOmegaCheck>,
    note: Option<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    config: &'a RunConfig,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<T>,
}

fn thresholds_for(cfg: &RunConfig, problem: &Problem) -> Result<ThresholdReport> {
    if problem.source().dim() < 2 {
        return Ok(ThresholdReport {
            sigma: None,
            thresholds: None,
            initial_omega: None,
            note: Some("dichotomy thresholds are undefined for n = 1; monitor disabled".into()),
        });
    }
    let est = diagnostics::estimate_sigma_mtw(&problem.cost, problem.source(), problem.target(), &cfg.mtw, cfg.seed)?;
    let th = diagnostics::dichotomy_thresholds(problem.source().dim(), est.sigma)?;
    Ok(ThresholdReport {
        sigma: Some(est),
        thresholds: Some(th),
        initial_omega: None,
        note: None,
    })
}

/// Steady state for c₀ and, when c differs, its continuation to c.
fn initial_data(
    cfg: &RunConfig,
    s: &Setup,
) -> Result<(PotentialState, Option<initdata::ContinuationReport>)> {
    let p0 = s.problem.with_cost(s.reference.clone());
    let steady = initdata::solve_steady(&p0, &cfg.flow, &cfg.continuation)?;
    if s.reference == s.problem.cost {
        return Ok((steady.state, None));
    }
    let c = initdata::continuation_initial_data(&s.problem, &s.reference, &steady.state, &cfg.continuation)?;
    Ok((c.state, Some(c.report)))
}

fn flow_exit(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Converged => EXIT_OK,
        Verdict::DichotomyBreach => EXIT_BREACH,
        Verdict::StepFailure | Verdict::MaxSteps => EXIT_FLOW,
    }
}

#[derive(Serialize)]
struct PipelineReport {
    continuation: Option<initdata::ContinuationReport>,
    initial_data: initdata::IcReport,
    dichotomy: ThresholdReport,
    flow: FlowSummary,
    verification: Option<Verification>,
}

#[derive(Serialize)]
struct InitReport {
    continuation: Option<initdata::ContinuationReport>,
    initial_data: initdata::IcReport,
}

#[derive(Serialize)]
struct FlowCmdReport {
    continuation: Option<initdata::ContinuationReport>,
    dichotomy: ThresholdReport,
    flow: FlowSummary,
}

fn finish<T: Serialize>(dir: &Path, cmd: Command, cfg: &RunConfig, code: i32, error: Option<String>, report: Option<T>) -> Result<i32> {
    let env = Envelope {
        command: cmd.name(),
        config: cfg,
        exit_code: code,
        error,
        report,
    };
    write_json(dir, &format!("{}.json", cmd.name()), &env)?;
    Ok(code)
}

fn run_command(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<i32> {
    match cmd {
        Command::Poly => {
            let p = cfg.poly.as_ref().ok_or_else(|| Error::Config("missing [poly] section".into()))?;
            let a = diagnostics::analyze_polynomial(p.n, p.sigma, p.c)?;
            finish(dir, cmd, cfg, EXIT_OK, None, Some(a))
        }
        Command::Mtw => {
            let s = setup(cfg)?;
            let th = thresholds_for(cfg, &s.problem)?;
            finish(dir, cmd, cfg, EXIT_OK, None, Some(th))
        }
        Command::Steady => {
            let s = setup(cfg)?;
            let st = initdata::solve_steady(&s.problem, &cfg.flow, &cfg.continuation)?;
            write_potential(&dir.join("potential.csv"), &st.state)?;
            write_flow_rows(dir, &st.report)?;
            finish(dir, cmd, cfg, EXIT_OK, None, Some(FlowSummary::of(&st.report)))
        }
        Command::Init => {
            let s = setup(cfg)?;
            let (u, cont) = initial_data(cfg, &s)?;
            let ic = initdata::check_ic(&s.problem, &u, cfg.verify.ic_pairs, cfg.seed)?;
            write_potential(&dir.join("u_init.csv"), &u)?;
            let code = if ic.pass { EXIT_OK } else { EXIT_VERIFICATION };
            finish(dir, cmd, cfg, code, None, Some(InitReport { continuation: cont, initial_data: ic }))
        }
        Command::Flow => {
            let s = setup(cfg)?;
            let (u, cont) = initial_data(cfg, &s)?;
            let dichotomy = thresholds_for(cfg, &s.problem)?;
            let report = flow::run_flow(&s.problem, u, &cfg.flow, dichotomy.thresholds.as_ref())?;
            write_flow_rows(dir, &report)?;
            write_potential(&dir.join("potential.csv"), &report.final_state)?;
            let code = flow_exit(report.verdict);
            let summary = FlowSummary::of(&report);
            finish(dir, cmd, cfg, code, None, Some(FlowCmdReport { continuation: cont, dichotomy, flow: summary }))
        }
        Command::Pipeline => pipeline(cfg, dir),
        Command::Verify => {
            let s = setup(cfg)?;
            let input = cfg
                .verify
                .input
                .as_ref()
                .ok_or_else(|| Error::Config("verify.input is not set".into()))?;
            let v = read_potential(Path::new(input), &s.problem)?;
            let n = s.problem.source().dim();
            let mut state = flow::assemble_state(&s.problem, QuadraticBase::zero(n), v, 0.0, None)?;
            state = state.zero_mean();
            let ver = verify_state(&s.problem, &state, &cfg.verify)?;
            let code = if ver.passes { EXIT_OK } else { EXIT_VERIFICATION };
            finish(dir, cmd, cfg, code, None, Some(ver))
        }
    }
}

fn pipeline(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let s = setup(cfg)?;
    let mut dichotomy = thresholds_for(cfg, &s.problem)?;
    let (u, cont) = initial_data(cfg, &s)?;
    let ic = initdata::check_ic(&s.problem, &u, cfg.verify.ic_pairs, cfg.seed)?;
    write_potential(&dir.join("u_init.csv"), &u)?;
    match &dichotomy.thresholds {
        Some(th) => {
            let check = diagnostics::initial_omega_check(u.max_w_norm(), th);
            log::info!(
                "initial ω check: max‖W‖ = {:.6e}, bound = {:.6e}, holds = {}",
                check.max_w_norm,
                check.bound,
                check.holds
            );
            dichotomy.initial_omega = Some(check);
        }
        None => log::info!("initial ω check: not applicable for n = 1 (max‖W‖ = {:.6e})", u.max_w_norm()),
    }
    let report = flow::run_flow(&s.problem, u, &cfg.flow, dichotomy.thresholds.as_ref())?;
    write_flow_rows(dir, &report)?;
    write_potential(&dir.join("potential.csv"), &report.final_state)?;
    let mut code = flow_exit(report.verdict);
    let verification = if report.verdict == Verdict::Converged {
        let state = report.final_state.zero_mean();
        let v = verify_state(&s.problem, &state, &cfg.verify)?;
        if !v.passes {
            code = EXIT_VERIFICATION;
        }
        Some(v)
    } else {
        None
    };
    let out = PipelineReport {
        continuation: cont,
        initial_data: ic,
        dichotomy,
        flow: FlowSummary::of(&report),
        verification,
    };
    finish(dir, Command::Pipeline, cfg, code, None, Some(out))
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Err(Error::Config("--config is required".into())),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(r) = cli.resolution {
        cfg.resolution = r;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = Some(dir.to_string_lossy().into_owned());
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: cannot create {}: {e}", dir.display());
        return EXIT_CONFIG;
    }
    match run_command(cli.command, &cfg, &dir) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            log::error!("{e}");
            eprintln!("error: {e}");
            // best effort: record the failure next to the other artifacts
            let _ = finish::<()>(&dir, cli.command, &cfg, code, Some(e.to_string()), None);
            code
        }
    }
}

/// Initialize logging from PAROT_LOG (default: warn).
pub fn init_logging() {
    let env = env_logger::Env::default().filter_or("PAROT_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
