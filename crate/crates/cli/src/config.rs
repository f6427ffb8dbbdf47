//! Experiment configuration: a strict TOML document with one table per stage.

use std::path::Path;

use mfcontrol_core::problem::{ControlCost, ControlSet, DriftTerm, ProblemSpec, Schedule};
use mfcontrol_core::regularity::Sampler;
use mfcontrol_core::{FbsmOptions, Functional, ParticleEnsemble, RhoMode, TimeGrid};
use serde::Deserialize;

/// A rejected configuration. `field` is the dotted key at fault.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{0}")]
    Syntax(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Problem data; the horizon comes from `grid.T`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub dimension: usize,
    #[serde(default)]
    pub drift: Vec<DriftTerm>,
    #[serde(default)]
    pub drift_schedule: Schedule,
    #[serde(default)]
    pub running_cost: Functional,
    #[serde(default)]
    pub running_schedule: Schedule,
    #[serde(default)]
    pub final_cost: Functional,
    pub control_cost: ControlCost,
    pub control_set: ControlSet,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "M")]
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub omega: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = FbsmOptions::default();
        Self { omega: o.omega, tol: o.tol, max_iters: o.max_iters }
    }
}

/// Either `n` particles from `sampler`, or explicit `positions` (one row per particle).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub n: Option<usize>,
    pub sampler: Option<Sampler>,
    pub positions: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub coercivity: bool,
    pub lipschitz: bool,
    pub sweep: bool,
    pub oracle_compare: bool,
    pub rho_mode: RhoMode,
    pub dense_cap: usize,
    pub eps_sep: Option<f64>,
    pub fd_tol: f64,
    /// Acceptance threshold for the oracle comparison.
    pub oracle_tol: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            coercivity: false,
            lipschitz: false,
            sweep: false,
            oracle_compare: false,
            rho_mode: RhoMode::Dense,
            dense_cap: mfcontrol_core::coercivity::DENSE_CAP,
            eps_sep: None,
            fd_tol: 1e-5,
            oracle_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_list: Vec<usize>,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
}

fn default_sampler() -> Sampler {
    Sampler::UniformQuantile
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub trajectories: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into(), trajectories: true }
    }
}

/// Raw text plus the parsed and validated document.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub text: String,
    pub config: ExperimentConfig,
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
    let config = parse(&text)?;
    Ok(LoadedConfig { text, config })
}

pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string().trim_end().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("must be positive and finite (got {v})")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("grid.T", self.grid.horizon)?;
        if self.grid.steps == 0 {
            return Err(field_err("grid.M", "must be at least 1"));
        }
        let s = &self.solver;
        if !(s.omega > 0.0 && s.omega <= 1.0) {
            return Err(field_err("solver.omega", format!("must lie in (0, 1] (got {})", s.omega)));
        }
        positive("solver.tol", s.tol)?;
        if s.max_iters == 0 {
            return Err(field_err("solver.max_iters", "must be at least 1"));
        }
        if self.problem.dimension == 0 {
            return Err(field_err("problem.dimension", "must be at least 1"));
        }
        self.problem_spec().validate().map_err(|e| field_err("problem", e.to_string()))?;

        let d = self.problem.dimension;
        match (&self.initial.positions, &self.initial.sampler) {
            (Some(_), Some(_)) => return Err(field_err("initial", "give either positions or sampler, not both")),
            (None, None) => return Err(field_err("initial", "one of positions or sampler is required")),
            (Some(p), None) => {
                if self.initial.n.is_some_and(|n| n != p.len()) {
                    return Err(field_err("initial.n", "does not match the number of positions"));
                }
                if p.is_empty() {
                    return Err(field_err("initial.positions", "must not be empty"));
                }
                if p.iter().any(|row| row.len() != d) {
                    return Err(field_err("initial.positions", format!("each row must have {d} entries")));
                }
                if p.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(field_err("initial.positions", "entries must be finite"));
                }
            }
            (None, Some(sampler)) => {
                if !self.initial.n.is_some_and(|n| n > 0) {
                    return Err(field_err("initial.n", "a positive particle count is required with a sampler"));
                }
                check_sampler("initial.sampler", sampler)?;
            }
        }

        let a = &self.analysis;
        if a.dense_cap == 0 {
            return Err(field_err("analysis.dense_cap", "must be at least 1"));
        }
        if let Some(e) = a.eps_sep {
            positive("analysis.eps_sep", e)?;
        }
        positive("analysis.fd_tol", a.fd_tol)?;
        positive("analysis.oracle_tol", a.oracle_tol)?;
        match &self.sweep {
            Some(sw) => {
                if sw.n_list.is_empty() || sw.n_list.contains(&0) {
                    return Err(field_err("sweep.n_list", "must be a non-empty list of positive counts"));
                }
                check_sampler("sweep.sampler", &sw.sampler)?;
            }
            None if a.sweep => return Err(field_err("sweep", "section required when analysis.sweep is set")),
            None => {}
        }
        if self.output.dir.is_empty() {
            return Err(field_err("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        let p = &self.problem;
        ProblemSpec {
            dimension: p.dimension,
            drift: p.drift.clone(),
            drift_schedule: p.drift_schedule.clone(),
            running_cost: p.running_cost.clone(),
            running_schedule: p.running_schedule.clone(),
            final_cost: p.final_cost.clone(),
            control_cost: p.control_cost,
            control_set: p.control_set,
            horizon: self.grid.horizon,
        }
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.steps).expect("validated grid")
    }

    pub fn fbsm_options(&self) -> FbsmOptions {
        FbsmOptions { omega: self.solver.omega, tol: self.solver.tol, max_iters: self.solver.max_iters }
    }

    pub fn initial_ensemble(&self, seed: u64) -> Result<ParticleEnsemble, ConfigError> {
        let d = self.problem.dimension;
        let res = match (&self.initial.positions, &self.initial.sampler) {
            (Some(p), _) => ParticleEnsemble::from_points(p),
            (None, Some(s)) => s.sample(self.initial.n.unwrap_or(0), d, seed),
            (None, None) => unreachable!("validated initial section"),
        };
        res.map_err(|e| field_err("initial", e.to_string()))
    }
}

fn check_sampler(field: &str, s: &Sampler) -> Result<(), ConfigError> {
    match s {
        Sampler::TruncatedGaussian { sigma } => positive(&format!("{field}.sigma"), *sigma),
        Sampler::UniformQuantile => Ok(()),
    }
}
