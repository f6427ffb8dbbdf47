//! Stage orchestration and artifact emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfcontrol_core::coercivity::{estimate_rho, CoercivityReport};
use mfcontrol_core::measures::format_f64;
use mfcontrol_core::mfcalc::{fd_check, FdReport};
use mfcontrol_core::oracle_variance::{self, VarianceInstance};
use mfcontrol_core::pmp::{pmp_residual, solve_fbsm};
use mfcontrol_core::problem::{fd_drift_jacobian, validate_hypotheses, ControlSet, HypothesisReport, ProblemSpec};
use mfcontrol_core::regularity::{convergence_sweep, lipschitz_scan, RegularityReport, SweepTable};
use mfcontrol_core::{ControlCost, FbsmSolution, ParticleEnsemble, RhoOptions, Term, TimeGrid};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ExperimentConfig, LoadedConfig};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    Solve,
    Coercivity,
    Lipschitz,
    Sweep,
    Oracle,
    Check,
}

impl Command {
    fn stages(self, cfg: &ExperimentConfig) -> Stages {
        let a = &cfg.analysis;
        match self {
            Command::Run => Stages {
                check: false,
                solve: true,
                coercivity: a.coercivity,
                lipschitz: a.lipschitz,
                oracle: a.oracle_compare,
                sweep: a.sweep,
            },
            Command::Solve => Stages { solve: true, ..Stages::NONE },
            Command::Coercivity => Stages { solve: true, coercivity: true, ..Stages::NONE },
            Command::Lipschitz => Stages { solve: true, lipschitz: true, ..Stages::NONE },
            Command::Oracle => Stages { solve: true, oracle: true, ..Stages::NONE },
            Command::Sweep => Stages { sweep: true, ..Stages::NONE },
            Command::Check => Stages { check: true, ..Stages::NONE },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stages {
    check: bool,
    solve: bool,
    coercivity: bool,
    lipschitz: bool,
    oracle: bool,
    sweep: bool,
}

impl Stages {
    const NONE: Stages = Stages { check: false, solve: false, coercivity: false, lipschitz: false, oracle: false, sweep: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NotConverged,
    CheckFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::CheckFailed => 2,
            Status::NotConverged => 3,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Versions {
    #[serde(rename = "mfcontrol-core")]
    pub core: &'static str,
    #[serde(rename = "mfcontrol-cli")]
    pub cli: &'static str,
}

#[derive(Debug, Serialize)]
pub struct GridInfo {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "M")]
    pub steps: usize,
    pub h: f64,
}

#[derive(Debug, Serialize)]
pub struct InitialInfo {
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub cost: f64,
    pub pmp_residual: f64,
    pub omega: f64,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Serialize)]
pub struct CheckSummary {
    pub hypotheses: Option<HypothesisReport>,
    /// Set when a standing hypothesis fails.
    pub hypothesis_error: Option<String>,
    pub running_cost: Option<FdReport>,
    pub final_cost: Option<FdReport>,
    /// Relative error of the closed-form drift Jacobian at the initial data.
    pub drift_jacobian_error: f64,
    pub fd_tol: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct OracleSummary {
    pub lambda: f64,
    pub horizon: f64,
    pub bound: f64,
    pub rho: f64,
    /// `None` when the controls are not uniformly Lipschitz.
    pub lipschitz_bound: Option<f64>,
    pub max_control_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub oracle_cost: f64,
    pub fbsm_cost: f64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub command: Command,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub grid: GridInfo,
    pub initial: InitialInfo,
    pub problem: ProblemSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coercivity: Option<CoercivityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<RegularityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
    pub status: Status,
}

/// A failed run. `Config` errors and core validation errors map to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] mfcontrol_core::Error),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        use mfcontrol_core::Error as E;
        match self {
            RunError::Config(_) => 2,
            RunError::Core(E::InvalidInput(_) | E::Unsupported(_) | E::Hypothesis { .. } | E::TooLarge { .. })
            | RunError::Core(E::DimensionMismatch { .. } | E::Parse { .. }) => 2,
            _ => 1,
        }
    }
}

pub struct RunOutcome {
    pub summary: Summary,
    pub out_dir: PathBuf,
    /// Relative paths of everything written, in write order.
    pub files: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Variance instance behind `spec` and `x0`, if the problem has that form.
fn variance_instance(spec: &ProblemSpec, x0: &ParticleEnsemble) -> Result<VarianceInstance, RunError> {
    let is_variance = spec.dimension == 1
        && !spec.has_drift()
        && spec.running_cost.is_zero()
        && matches!(spec.final_cost.terms.as_slice(), [Term::Variance { coef }] if *coef == -0.5)
        && matches!(spec.control_cost, ControlCost::Quadratic { .. })
        && matches!(spec.control_set, ControlSet::Box { .. });
    if !is_variance {
        return Err(ConfigError::Field {
            field: "problem".into(),
            message: "oracle comparison needs the one-dimensional variance problem".into(),
        }
        .into());
    }
    VarianceInstance::new(x0.clone(), spec.control_cost.lambda(), spec.horizon, spec.control_set.bound()).map_err(|e| {
        ConfigError::Field { field: "initial".into(), message: e.to_string() }.into()
    })
}

fn check_stage(spec: &ProblemSpec, x0: &ParticleEnsemble, fd_tol: f64) -> Result<CheckSummary, RunError> {
    let (hypotheses, hypothesis_error) = match validate_hypotheses(spec) {
        Ok(r) => (Some(r), None),
        Err(e @ mfcontrol_core::Error::Hypothesis { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let fd = |f: &mfcontrol_core::Functional| -> Result<Option<FdReport>, RunError> {
        if f.is_zero() || f.has_custom() {
            return Ok(None);
        }
        Ok(Some(fd_check(f, x0, fd_tol)?))
    };
    let running_cost = fd(&spec.running_cost)?;
    let final_cost = fd(&spec.final_cost)?;
    let n = x0.n();
    let closed = spec.drift_jacobian(0.0, n, x0.as_slice()).to_matrix();
    let numeric = fd_drift_jacobian(spec, 0.0, n, x0.as_slice(), 1e-5);
    let scale = closed.amax().max(1.0);
    let drift_jacobian_error = (closed - numeric).amax() / scale;
    let passed = hypothesis_error.is_none()
        && running_cost.as_ref().is_none_or(|r| r.passed)
        && final_cost.as_ref().is_none_or(|r| r.passed)
        && drift_jacobian_error <= fd_tol;
    Ok(CheckSummary { hypotheses, hypothesis_error, running_cost, final_cost, drift_jacobian_error, fd_tol, passed })
}

fn oracle_stage(inst: &VarianceInstance, sol: &FbsmSolution, tol: f64) -> Result<(OracleSummary, String), RunError> {
    let u = oracle_variance::closed_form_control(inst);
    let mut err: f64 = 0.0;
    for interval in sol.triple.controls.intervals() {
        for (a, b) in interval.as_slice().iter().zip(u.as_slice()) {
            err = err.max((a - b).abs());
        }
    }
    let bound = oracle_variance::lipschitz_bound(inst);
    let summary = OracleSummary {
        lambda: inst.lambda,
        horizon: inst.horizon,
        bound: inst.bound,
        rho: oracle_variance::closed_form_rho(inst.lambda, inst.horizon),
        lipschitz_bound: bound.is_finite().then_some(bound),
        max_control_error: err,
        tol,
        passed: err <= tol,
        oracle_cost: oracle_variance::discrete_cost(inst, &u)?,
        fbsm_cost: sol.cost(),
    };
    let mut csv = String::from("i,x0,u_oracle,u_fbsm_first,u_fbsm_last\n");
    let (first, last) = (sol.triple.controls.interval(0), sol.triple.controls.at_node(sol.triple.grid.steps()));
    for i in 0..inst.n() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            format_f64(inst.x0().particle(i)[0]),
            format_f64(u.entry(i)[0]),
            format_f64(first.entry(i)[0]),
            format_f64(last.entry(i)[0])
        );
    }
    Ok((summary, csv))
}

fn history_csv(sol: &FbsmSolution) -> String {
    let mut s = String::from("iteration,residual,cost\n");
    for (k, (r, c)) in sol.residual_history.iter().zip(&sol.cost_history).enumerate() {
        let _ = writeln!(s, "{},{},{}", k + 1, format_f64(*r), format_f64(*c));
    }
    s
}

/// Runs `command` and writes every artifact under `out_dir`. Files are staged in memory and
/// written by the calling thread once all stages are done.
pub fn execute(loaded: &LoadedConfig, command: Command, seed: u64, out_dir: &Path) -> Result<RunOutcome, RunError> {
    let cfg = &loaded.config;
    let spec = cfg.problem_spec();
    let grid: TimeGrid = cfg.time_grid();
    let x0 = cfg.initial_ensemble(seed)?;
    let stages = command.stages(cfg);
    let mut files: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut status = Status::Ok;

    let check = if stages.check {
        let c = check_stage(&spec, &x0, cfg.analysis.fd_tol)?;
        if !c.passed {
            status = Status::CheckFailed;
        }
        Some(c)
    } else {
        None
    };

    // the oracle needs a variance instance; reject early, before solving
    let oracle_inst = if stages.oracle { Some(variance_instance(&spec, &x0)?) } else { None };

    let sol = if stages.solve {
        log::info!("solving N={} d={} M={}", x0.n(), x0.d(), grid.steps());
        let sol = solve_fbsm(&spec, &x0, &grid, &cfg.fbsm_options())?;
        if !sol.converged {
            log::warn!("sweep did not converge: residual {:e} after {} iterations", sol.residual, sol.iterations);
            status = Status::NotConverged;
        }
        files.insert("fbsm_history.csv", history_csv(&sol));
        Some(sol)
    } else {
        None
    };
    let solve = match &sol {
        Some(s) => Some(SolveSummary {
            converged: s.converged,
            iterations: s.iterations,
            residual: s.residual,
            cost: s.cost(),
            pmp_residual: pmp_residual(&spec, &s.triple)?,
            omega: cfg.solver.omega,
            tol: cfg.solver.tol,
            max_iters: cfg.solver.max_iters,
        }),
        None => None,
    };

    let coercivity = match (&sol, stages.coercivity) {
        (Some(s), true) => {
            let opts = RhoOptions { mode: cfg.analysis.rho_mode, dense_cap: cfg.analysis.dense_cap, seed };
            let report = estimate_rho(&spec, &s.triple, &opts)?;
            files.insert("coercivity.txt", report.to_text());
            Some(report)
        }
        _ => None,
    };

    let lipschitz = match (&sol, stages.lipschitz) {
        (Some(s), true) => {
            let report = lipschitz_scan(&s.triple, cfg.analysis.eps_sep);
            files.insert("lipschitz_profile.csv", report.profile_csv(&grid));
            Some(report)
        }
        _ => None,
    };

    let oracle = match (&sol, &oracle_inst) {
        (Some(s), Some(inst)) => {
            let (summary, csv) = oracle_stage(inst, s, cfg.analysis.oracle_tol)?;
            files.insert("oracle_controls.csv", csv);
            Some(summary)
        }
        _ => None,
    };

    let sweep = if stages.sweep {
        let sw = cfg.sweep.as_ref().ok_or_else(|| ConfigError::Field {
            field: "sweep".into(),
            message: "section required for the sweep stage".into(),
        })?;
        let table = convergence_sweep(&spec, &sw.sampler, &sw.n_list, &grid, &cfg.fbsm_options(), seed)?;
        if !table.all_converged() {
            status = Status::NotConverged;
        }
        files.insert("sweep.csv", table.to_csv());
        Some(table)
    } else {
        None
    };

    let summary = Summary {
        schema: SCHEMA,
        command,
        config_sha256: sha256_hex(loaded.text.as_bytes()),
        seed,
        versions: Versions { core: mfcontrol_core::VERSION, cli: env!("CARGO_PKG_VERSION") },
        grid: GridInfo { horizon: grid.horizon(), steps: grid.steps(), h: grid.step() },
        initial: InitialInfo { n: x0.n(), d: x0.d() },
        problem: spec,
        check,
        solve,
        coercivity,
        lipschitz,
        oracle,
        sweep,
        status,
    };

    let mut json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    json.push('\n');
    files.insert("summary.json", json);

    let write_err = |p: &Path, e: std::io::Error| RunError::Write { path: p.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(out_dir).map_err(|e| write_err(out_dir, e))?;
    let mut written = Vec::new();
    for (name, body) in &files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| write_err(&path, e))?;
        written.push(PathBuf::from(name));
    }
    if let (Some(s), true) = (&sol, cfg.output.trajectories) {
        s.triple.write_dir(&out_dir.join("trajectories"))?;
        written.extend(["states.txt", "costates.txt", "controls.txt"].map(|f| Path::new("trajectories").join(f)));
    }
    Ok(RunOutcome { summary, out_dir: out_dir.to_path_buf(), files: written })
}
