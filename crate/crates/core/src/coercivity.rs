//! Second-order analysis along a Pontryagin triple.
//!
//! For a perturbation `w` (piecewise constant on the grid) with linearised response
//! `ẏ = A(t) y + w`, `y(0) = 0`, the quadratic form is
//!
//! ```text
//! Q(w) = B_φ(y(T), y(T)) − ∫ B_{H,x}(y, y) dt + ∫ (1/N) Σ_i ⟨∇²ψ(u_i) w_i, w_i⟩ dt
//! ```
//!
//! and the coercivity constant is the infimum of `Q(w) / ∫|w|_N² dt`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{ParticleEnsemble, RescaledVector};
use crate::mfcalc::{mf_hessian, MfHessianOperator};
use crate::pmp::{PontryaginTriple, TimeGrid};
use crate::problem::{validate_hypotheses, DriftJacobian, ProblemSpec};

/// Default bound on `M·N·d` for the dense eigenproblem.
pub const DENSE_CAP: usize = 4096;
/// Verdict threshold on `rho_hat`.
pub const VERDICT_TOL: f64 = 1e-8;

/// Drift linearisation along a trajectory: for each interval, `A` at its start, midpoint and end.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    grid: TimeGrid,
    n: usize,
    d: usize,
    stages: Option<Vec<[DriftJacobian; 3]>>,
}

impl LinearizedSystem {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn is_zero(&self) -> bool {
        self.stages.is_none()
    }

    /// Drift blocks at node `k`.
    pub fn at_node(&self, k: usize) -> DriftJacobian {
        match &self.stages {
            None => DriftJacobian::zeros(self.n, self.d),
            Some(s) if k < s.len() => s[k][0].clone(),
            Some(s) => s[s.len() - 1][2].clone(),
        }
    }
}

/// Evaluates the drift derivative blocks along the stored trajectory.
pub fn linearize(spec: &ProblemSpec, triple: &PontryaginTriple) -> LinearizedSystem {
    let grid = triple.grid;
    let (n, d) = (triple.n(), triple.d());
    if !spec.has_drift() {
        return LinearizedSystem { grid, n, d, stages: None };
    }
    let h = grid.step();
    let stages: Vec<[DriftJacobian; 3]> = (0..grid.steps())
        .into_par_iter()
        .map(|k| {
            let ts = grid.midpoint(k);
            let (x0, x1) = (triple.states[k].as_slice(), triple.states[k + 1].as_slice());
            let uk = triple.controls.interval(k).as_slice();
            let f = |x: &[f64]| {
                let mut v = spec.drift_field(ts, n, x);
                v.iter_mut().zip(uk).for_each(|(a, b)| *a += b);
                v
            };
            let (f0, f1) = (f(x0), f(x1));
            let xm: Vec<f64> = (0..n * d).map(|i| 0.5 * (x0[i] + x1[i]) + h * (f0[i] - f1[i]) / 8.0).collect();
            [spec.drift_jacobian(ts, n, x0), spec.drift_jacobian(ts, n, &xm), spec.drift_jacobian(ts, n, x1)]
        })
        .collect();
    if stages.iter().all(|s| s.iter().all(DriftJacobian::is_zero)) {
        return LinearizedSystem { grid, n, d, stages: None };
    }
    LinearizedSystem { grid, n, d, stages: Some(stages) }
}

/// RK4 solution of `ẏ = A(t) y + w` from `y(0) = 0`; `w[k]` is the perturbation on interval `k`.
pub fn propagate(linsys: &LinearizedSystem, w: &[RescaledVector]) -> Result<Vec<RescaledVector>> {
    let m = linsys.grid.steps();
    if w.len() != m {
        return Err(Error::invalid(format!("perturbation has {} intervals, grid has {m}", w.len())));
    }
    let (n, d) = (linsys.n, linsys.d);
    if let Some(bad) = w.iter().find(|v| (v.n(), v.d()) != (n, d)) {
        return Err(Error::DimensionMismatch { expected_n: n, expected_d: d, found_n: bad.n(), found_d: bad.d() });
    }
    let flat: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
    Ok(propagate_raw(linsys, &flat).into_iter().map(|y| RescaledVector::from_raw(n, d, y)).collect())
}

fn propagate_raw(linsys: &LinearizedSystem, w: &[&[f64]]) -> Vec<Vec<f64>> {
    let m = linsys.grid.steps();
    let h = linsys.grid.step();
    let len = linsys.n * linsys.d;
    let mut y = vec![0.0; len];
    let mut out = Vec::with_capacity(m + 1);
    out.push(y.clone());
    for k in 0..m {
        match &linsys.stages {
            None => {
                for (a, b) in y.iter_mut().zip(w[k]) {
                    *a += h * b;
                }
            }
            Some(stages) => {
                let [a0, am, a1] = &stages[k];
                let rhs = |a: &DriftJacobian, y: &[f64]| {
                    let mut f = w[k].to_vec();
                    a.apply_add(y, &mut f);
                    f
                };
                let k1 = rhs(a0, &y);
                let k2 = rhs(am, &axpy(&y, 0.5 * h, &k1));
                let k3 = rhs(am, &axpy(&y, 0.5 * h, &k2));
                let k4 = rhs(a1, &axpy(&y, h, &k3));
                for i in 0..len {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        out.push(y.clone());
    }
    out
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(p, q)| p + a * q).collect()
}

/// Hessian data entering `Q`, precomputed along the triple.
struct FormData {
    n: usize,
    d: usize,
    h: f64,
    final_hessian: MfHessianOperator,
    /// Trapezoid-weighted `B_{H,x}` at each node, `None` where it vanishes.
    state_hessians: Vec<Option<MfHessianOperator>>,
    /// `∇²ψ(u_{k,i})` per interval and particle, row-major.
    control_hessians: Vec<Vec<f64>>,
}

fn form_data(spec: &ProblemSpec, triple: &PontryaginTriple) -> Result<FormData> {
    let grid = triple.grid;
    let (n, d) = (triple.n(), triple.d());
    let m = grid.steps();
    let h = grid.step();
    let final_hessian = mf_hessian(&spec.final_cost, &triple.states[m])?.operator;
    let has_l = !spec.running_cost.is_zero();
    let has_v = spec.has_drift();
    let state_hessians = (0..=m)
        .into_par_iter()
        .map(|k| -> Result<Option<MfHessianOperator>> {
            if !has_l && !has_v {
                return Ok(None);
            }
            let x = &triple.states[k];
            let r = &triple.costates[k];
            let lh = if has_l { Some(mf_hessian(&spec.running_cost, x)?.operator) } else { None };
            let mut acc = MfHessianOperator::zeros(n, d);
            // each adjacent interval contributes h/2 with its own schedule values
            for j in [k.wrapping_sub(1), k] {
                if j >= m {
                    continue;
                }
                let ts = grid.midpoint(j);
                if has_v {
                    acc.add_scaled(0.5 * h, &spec.drift_state_hessian(ts, n, x.as_slice(), r.as_slice()));
                }
                if let Some(lh) = &lh {
                    acc.add_scaled(-0.5 * h * spec.running_schedule.at(ts), lh);
                }
            }
            Ok(if acc.is_zero() { None } else { Some(acc) })
        })
        .collect::<Result<Vec<_>>>()?;
    let control_hessians = (0..m)
        .map(|k| triple.controls.interval(k).entries().flat_map(|u| spec.control_cost.hessian(u)).collect())
        .collect();
    Ok(FormData { n, d, h, final_hessian, state_hessians, control_hessians })
}

/// `Q(w)` along `triple`.
pub fn quadratic_form(
    spec: &ProblemSpec,
    triple: &PontryaginTriple,
    linsys: &LinearizedSystem,
    w: &[RescaledVector],
) -> Result<f64> {
    let y = propagate(linsys, w)?;
    let data = form_data(spec, triple)?;
    Ok(evaluate_form(&data, &y, w))
}

fn evaluate_form(data: &FormData, y: &[RescaledVector], w: &[RescaledVector]) -> f64 {
    let m = w.len();
    let (n, d) = (data.n, data.d);
    let dd = d * d;
    let mut q = data.final_hessian.bilinear_raw(y[m].as_slice(), y[m].as_slice());
    for (k, op) in data.state_hessians.iter().enumerate() {
        if let Some(op) = op {
            q -= op.bilinear_raw(y[k].as_slice(), y[k].as_slice());
        }
    }
    for (k, wk) in w.iter().enumerate().take(m) {
        let wk = wk.as_slice();
        let mut s = 0.0;
        for i in 0..n {
            let wi = &wk[i * d..(i + 1) * d];
            s += linalg::bilinear(&data.control_hessians[k][i * dd..(i + 1) * dd], wi, wi);
        }
        q += data.h * s / n as f64;
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMode {
    /// Full symmetric eigenproblem on the `M·N·d` perturbation space.
    #[default]
    Dense,
    /// Rayleigh–Ritz on a seeded subspace; only an upper bound for the minimum.
    Subspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoOptions {
    pub mode: RhoMode,
    pub dense_cap: usize,
    pub seed: u64,
}

impl Default for RhoOptions {
    fn default() -> Self {
        Self { mode: RhoMode::Dense, dense_cap: DENSE_CAP, seed: 0 }
    }
}

/// Constants of the a priori sufficient condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientCondition {
    pub lambda_psi: f64,
    /// Largest negative curvature of the final cost at `x(T)`.
    pub m_phi: f64,
    /// Largest positive curvature of `x ↦ H_N` along the trajectory.
    pub m_h: f64,
    /// Largest logarithmic norm of the linearised drift.
    pub l_v: f64,
    pub lambda_p: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoercivityReport {
    pub mode: RhoMode,
    /// Size of the perturbation space (subspace size in subspace mode).
    pub dimension: usize,
    pub rho_hat: f64,
    pub upper_bound_only: bool,
    /// Minimising perturbation, one row of `N·d` values per interval, unit `∫|w|_N²`.
    pub min_quotient_vector: Vec<Vec<f64>>,
    /// Largest relative asymmetry of the assembled matrix before symmetrisation.
    pub symmetry_error: f64,
    pub sufficient: SufficientCondition,
    pub verdict: Verdict,
    /// `(interval, particle, coordinate)` entries of `u` on the boundary of `U`.
    pub active_bounds: Vec<[usize; 3]>,
}

impl CoercivityReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let s = &self.sufficient;
        let mut out = String::new();
        let mode = match self.mode {
            RhoMode::Dense => "dense",
            RhoMode::Subspace => "subspace",
        };
        let _ = writeln!(out, "mode: {mode}");
        let _ = writeln!(out, "dimension: {}", self.dimension);
        let _ = writeln!(out, "rho_hat: {:.12e}", self.rho_hat);
        let _ = writeln!(out, "upper_bound_only: {}", self.upper_bound_only);
        let _ = writeln!(out, "symmetry_error: {:.3e}", self.symmetry_error);
        let _ = writeln!(out, "lambda_psi: {:.12e}", s.lambda_psi);
        let _ = writeln!(out, "m_phi: {:.12e}", s.m_phi);
        let _ = writeln!(out, "m_h: {:.12e}", s.m_h);
        let _ = writeln!(out, "l_v: {:.12e}", s.l_v);
        let _ = writeln!(out, "sufficient_lambda_p: {:.12e}", s.lambda_p);
        let _ = writeln!(out, "margin: {:.12e}", s.margin);
        let _ = writeln!(out, "active_bounds: {}", self.active_bounds.len());
        let _ = writeln!(out, "verdict: {}", self.verdict.as_str());
        out
    }
}

fn active_bounds(spec: &ProblemSpec, triple: &PontryaginTriple) -> Vec<[usize; 3]> {
    let tol = 1e-9 * spec.control_set.bound();
    let mut out = Vec::new();
    for (k, u) in triple.controls.intervals().iter().enumerate() {
        for (i, ui) in u.entries().enumerate() {
            for c in 0..ui.len() {
                if spec.control_set.is_active(ui, c, tol) {
                    out.push([k, i, c]);
                }
            }
        }
    }
    out
}

/// Assembles `Q` on the span of `basis` (each column a full perturbation, flattened interval-major).
fn assemble(data: &FormData, linsys: &LinearizedSystem, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let m = linsys.grid.steps();
    let len = data.n * data.d;
    let cols = basis.ncols();
    let responses: Vec<Vec<Vec<f64>>> = (0..cols)
        .into_par_iter()
        .map(|c| {
            let col = basis.column(c);
            let w: Vec<&[f64]> = (0..m).map(|k| &col.as_slice()[k * len..(k + 1) * len]).collect();
            propagate_raw(linsys, &w)
        })
        .collect();
    let node_matrix = |k: usize| DMatrix::from_fn(len, cols, |r, c| responses[c][k][r]);

    let ym = node_matrix(m);
    let pf = data.final_hessian.plain_matrix();
    let mut q = ym.transpose() * &pf * &ym;
    let state_terms: Vec<DMatrix<f64>> = data
        .state_hessians
        .par_iter()
        .enumerate()
        .filter_map(|(k, op)| op.as_ref().map(|op| (k, op)))
        .map(|(k, op)| {
            let yk = node_matrix(k);
            yk.transpose() * op.plain_matrix() * &yk
        })
        .collect();
    for t in state_terms {
        q -= t;
    }
    // block-diagonal control term: h/N ∇²ψ(u_{k,i}) on each (k, i) block
    let d = data.d;
    let mut g = DMatrix::zeros(m * len, m * len);
    for k in 0..m {
        for i in 0..data.n {
            let hb = &data.control_hessians[k][i * d * d..(i + 1) * d * d];
            for p in 0..d {
                for s in 0..d {
                    g[(k * len + i * d + p, k * len + i * d + s)] = data.h * hb[p * d + s] / data.n as f64;
                }
            }
        }
    }
    q += basis.transpose() * g * basis;
    q
}

fn symmetrize(q: &mut DMatrix<f64>) -> f64 {
    let scale = q.amax().max(f64::MIN_POSITIVE);
    let asym = (&*q - q.transpose()).amax() / scale;
    let t = q.transpose();
    *q += t;
    *q *= 0.5;
    asym
}

/// Orthonormal (in `∫|w|_N²`) subspace: cosine time modes times particle directions.
fn subspace_basis(m: usize, n: usize, d: usize, h: f64, seed: u64) -> DMatrix<f64> {
    let len = n * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let particle_dirs: Vec<Vec<f64>> = if len <= 64 {
        (0..len).map(|j| (0..len).map(|r| if r == j { 1.0 } else { 0.0 }).collect()).collect()
    } else {
        (0..64).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let modes = (512 / particle_dirs.len()).clamp(1, 8).min(m);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..modes {
        let profile: Vec<f64> = (0..m).map(|k| (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / m as f64).cos()).collect();
        for p in &particle_dirs {
            cols.push(profile.iter().flat_map(|&a| p.iter().map(move |&b| a * b)).collect());
        }
    }
    for _ in 0..16 {
        cols.push((0..m * len).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    // Gram–Schmidt in the weighted inner product (h/N)·Σ
    let weight = h / n as f64;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut c in cols {
        for _ in 0..2 {
            for b in &basis {
                let proj = weight * linalg::dot(&c, b);
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let nrm = (weight * linalg::dot(&c, &c)).sqrt();
        if nrm > 1e-10 {
            c.iter_mut().for_each(|x| *x /= nrm);
            basis.push(c);
        }
    }
    DMatrix::from_fn(m * len, basis.len(), |r, c| basis[c][r])
}

/// Estimates the sharp coercivity constant and evaluates the sufficient condition.
pub fn estimate_rho(spec: &ProblemSpec, triple: &PontryaginTriple, opts: &RhoOptions) -> Result<CoercivityReport> {
    let grid = triple.grid;
    let (n, d) = (triple.n(), triple.d());
    let m = grid.steps();
    let dim = m * n * d;
    let data = form_data(spec, triple)?;
    let linsys = linearize(spec, triple);
    let weight = grid.step() / n as f64;

    let (mut q, basis) = match opts.mode {
        RhoMode::Dense => {
            if dim > opts.dense_cap {
                return Err(Error::TooLarge { dim, cap: opts.dense_cap });
            }
            // unit perturbations scaled to unit weighted norm
            let basis = DMatrix::identity(dim, dim) / weight.sqrt();
            (assemble(&data, &linsys, &basis), basis)
        }
        RhoMode::Subspace => {
            let basis = subspace_basis(m, n, d, grid.step(), opts.seed);
            (assemble(&data, &linsys, &basis), basis)
        }
    };
    let symmetry_error = symmetrize(&mut q);
    let eig = SymmetricEigen::new(q);
    let (imin, rho_hat) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let coeffs = eig.eigenvectors.column(imin);
    let w = &basis * coeffs;
    let len = n * d;
    let min_quotient_vector = (0..m).map(|k| w.as_slice()[k * len..(k + 1) * len].to_vec()).collect();

    let sufficient = sufficient_margin(spec, triple)?;
    let upper_bound_only = opts.mode == RhoMode::Subspace;
    let verdict = if rho_hat < -VERDICT_TOL {
        Verdict::Fails
    } else if rho_hat > VERDICT_TOL && !upper_bound_only {
        Verdict::Holds
    } else {
        Verdict::Inconclusive
    };
    Ok(CoercivityReport {
        mode: opts.mode,
        dimension: basis.ncols(),
        rho_hat,
        upper_bound_only,
        min_quotient_vector,
        symmetry_error,
        sufficient,
        verdict,
        active_bounds: active_bounds(spec, triple),
    })
}

/// `λ̂ = (M_φ + T·M_H)·T·exp(2 L_v T)` and the margin `λ_ψ − λ̂`.
///
/// By Grönwall, `|y(t)|_N² ≤ t·exp(2 L_v t) ∫|w|_N²`, which bounds the two state terms of `Q`
/// from below by `−λ̂ ∫|w|_N²`; a positive margin therefore lower-bounds the coercivity constant.
pub fn sufficient_margin(spec: &ProblemSpec, triple: &PontryaginTriple) -> Result<SufficientCondition> {
    let grid = triple.grid;
    let n = triple.n();
    let m = grid.steps();
    let t = spec.horizon;
    let lambda_psi = validate_hypotheses(spec)?.lambda_psi;

    let (phi_min, _) = mf_hessian(&spec.final_cost, &triple.states[m])?.operator.rayleigh_range();
    let m_phi = (-phi_min).max(0.0);

    let per_node: Vec<(f64, f64)> = (0..=m)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let j = k.min(m - 1);
            let ts = grid.midpoint(j);
            let x: &ParticleEnsemble = &triple.states[k];
            let mut op = spec.drift_state_hessian(ts, n, x.as_slice(), triple.costates[k].as_slice());
            if !spec.running_cost.is_zero() {
                op.add_scaled(-spec.running_schedule.at(ts), &mf_hessian(&spec.running_cost, x)?.operator);
            }
            let mh = if op.is_zero() { 0.0 } else { op.rayleigh_range().1.max(0.0) };
            let lv = if spec.has_drift() { linalg::log_norm(&spec.drift_jacobian(ts, n, x.as_slice()).to_matrix()) } else { 0.0 };
            Ok((mh, lv))
        })
        .collect::<Result<_>>()?;
    let m_h = per_node.iter().fold(0.0f64, |a, p| a.max(p.0));
    let l_v = per_node.iter().fold(0.0f64, |a, p| a.max(p.1));
    let lambda_p = (m_phi + t * m_h) * t * (2.0 * l_v * t).exp();
    Ok(SufficientCondition { lambda_psi, m_phi, m_h, l_v, lambda_p, margin: lambda_psi - lambda_p })
}
