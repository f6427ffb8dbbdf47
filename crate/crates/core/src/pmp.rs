//! State/costate integration, Hamiltonian maximisation and the forward–backward sweep.
//!
//! Costates are carried in rescaled form `r = N p`, so every quantity stays `O(1)` in `N`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{format_f64, norm_n, support_radius, ParticleEnsemble, RescaledVector};
use crate::mfcalc::{mf_gradient, Functional};
use crate::problem::{ControlSet, ProblemSpec};

/// Uniform grid `t_k = kT/M`, `k = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("grid horizon must be positive and finite"));
        }
        if steps == 0 {
            return Err(Error::invalid("grid must have at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.step()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }

    /// Trapezoidal weight of node `k`.
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.steps {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    fn check_spec(&self, spec: &ProblemSpec) -> Result<()> {
        if (self.horizon - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
            return Err(Error::invalid(format!(
                "grid horizon {} differs from the problem horizon {}",
                self.horizon, spec.horizon
            )));
        }
        Ok(())
    }
}

/// Per-particle controls, constant on each grid interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlTrajectory {
    intervals: Vec<RescaledVector>,
}

impl ControlTrajectory {
    pub fn zeros(steps: usize, n: usize, d: usize) -> Self {
        Self { intervals: vec![RescaledVector::zeros(n, d); steps] }
    }

    pub fn constant(steps: usize, u: RescaledVector) -> Self {
        Self { intervals: vec![u; steps] }
    }

    pub fn from_intervals(intervals: Vec<RescaledVector>) -> Result<Self> {
        let first = intervals.first().ok_or_else(|| Error::invalid("control trajectory needs one interval"))?;
        let (n, d) = (first.n(), first.d());
        if let Some(bad) = intervals.iter().find(|u| (u.n(), u.d()) != (n, d)) {
            return Err(Error::DimensionMismatch { expected_n: n, expected_d: d, found_n: bad.n(), found_d: bad.d() });
        }
        Ok(Self { intervals })
    }

    pub fn steps(&self) -> usize {
        self.intervals.len()
    }

    pub fn n(&self) -> usize {
        self.intervals[0].n()
    }

    pub fn d(&self) -> usize {
        self.intervals[0].d()
    }

    /// Control on `[t_k, t_{k+1})`.
    pub fn interval(&self, k: usize) -> &RescaledVector {
        &self.intervals[k]
    }

    /// Control attached to node `k` (the interval starting there, the last one at `T`).
    pub fn at_node(&self, k: usize) -> &RescaledVector {
        &self.intervals[k.min(self.intervals.len() - 1)]
    }

    pub fn intervals(&self) -> &[RescaledVector] {
        &self.intervals
    }

    pub fn all_in(&self, set: &ControlSet, slack: f64) -> bool {
        self.intervals.iter().all(|u| u.entries().all(|ui| set.contains(ui, slack)))
    }
}

/// States, rescaled costates and controls on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PontryaginTriple {
    pub grid: TimeGrid,
    pub states: Vec<ParticleEnsemble>,
    pub costates: Vec<RescaledVector>,
    pub controls: ControlTrajectory,
}

const TABLES: [&str; 3] = ["states", "costates", "controls"];

impl PontryaginTriple {
    pub fn n(&self) -> usize {
        self.states[0].n()
    }

    pub fn d(&self) -> usize {
        self.states[0].d()
    }

    /// Writes `states.txt`, `costates.txt` and `controls.txt` into `dir`.
    ///
    /// Each table starts with a `#` comment and a `K N d` header, followed by one row per
    /// node (per interval for controls): the time, then the `N·d` values particle by particle.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (n, d) = (self.n(), self.d());
        let states: Vec<&[f64]> = self.states.iter().map(|s| s.as_slice()).collect();
        let costates: Vec<&[f64]> = self.costates.iter().map(|r| r.as_slice()).collect();
        let controls: Vec<&[f64]> = self.controls.intervals.iter().map(|u| u.as_slice()).collect();
        for (name, rows) in TABLES.iter().zip([states, costates, controls]) {
            let mut s = format!("# {name}: time then N*d values, particle-major\n{} {n} {d}\n", rows.len());
            for (k, row) in rows.iter().enumerate() {
                s.push_str(&format_f64(self.grid.node(k)));
                for v in row.iter() {
                    let _ = write!(s, " {}", format_f64(*v));
                }
                s.push('\n');
            }
            let path = dir.join(format!("{name}.txt"));
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut tables = Vec::new();
        for name in TABLES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            tables.push(parse_table(&text)?);
        }
        let (ts, xs, n, d) = tables.remove(0);
        let (_, rs, n2, d2) = tables.remove(0);
        let (_, us, n3, d3) = tables.remove(0);
        if (n, d) != (n2, d2) || (n, d) != (n3, d3) || rs.len() != xs.len() || us.len() + 1 != xs.len() {
            return Err(Error::invalid("trajectory tables have inconsistent shapes"));
        }
        let grid = TimeGrid::new(*ts.last().expect("non-empty table"), us.len())?;
        Ok(Self {
            grid,
            states: xs.into_iter().map(|v| ParticleEnsemble::new(n, d, v)).collect::<Result<_>>()?,
            costates: rs.into_iter().map(|v| RescaledVector::new(n, d, v)).collect::<Result<_>>()?,
            controls: ControlTrajectory::from_intervals(
                us.into_iter().map(|v| RescaledVector::new(n, d, v)).collect::<Result<_>>()?,
            )?,
        })
    }
}

type Table = (Vec<f64>, Vec<Vec<f64>>, usize, usize);

fn parse_table(text: &str) -> Result<Table> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hl, head) = lines.next().ok_or(Error::Parse { line: 1, message: "missing `K N d` header".into() })?;
    let head: Vec<usize> = head
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e: std::num::ParseIntError| Error::Parse { line: hl + 1, message: e.to_string() })?;
    let [k, n, d] = head[..] else {
        return Err(Error::Parse { line: hl + 1, message: "header must be `K N d`".into() });
    };
    let (mut ts, mut rows) = (Vec::new(), Vec::new());
    for (ln, line) in lines {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| Error::Parse { line: ln + 1, message: e.to_string() })?;
        if vals.len() != 1 + n * d {
            return Err(Error::Parse { line: ln + 1, message: format!("expected {} values", 1 + n * d) });
        }
        ts.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    if rows.len() != k || k == 0 {
        return Err(Error::Parse { line: hl + 1, message: format!("header announces {k} rows, found {}", rows.len()) });
    }
    Ok((ts, rows, n, d))
}

/// `H_N = (1/N) Σ_i (⟨r_i, v(t,μ[x],x_i) + u_i⟩ − ψ(u_i)) − L(t, μ[x])`.
pub fn hamiltonian(spec: &ProblemSpec, t: f64, x: &ParticleEnsemble, r: &RescaledVector, u: &RescaledVector) -> Result<f64> {
    for v in [r, u] {
        if (v.n(), v.d()) != (x.n(), x.d()) {
            return Err(Error::DimensionMismatch { expected_n: x.n(), expected_d: x.d(), found_n: v.n(), found_d: v.d() });
        }
    }
    let n = x.n();
    let v = spec.drift_field(t, n, x.as_slice());
    let mut s = 0.0;
    for i in 0..n {
        let (ri, ui, vi) = (r.entry(i), u.entry(i), &v[i * x.d()..(i + 1) * x.d()]);
        s += ri.iter().zip(vi.iter().zip(ui)).map(|(a, (b, c))| a * (b + c)).sum::<f64>() - spec.control_cost.value(ui);
    }
    Ok(s / n as f64 - spec.running_schedule.at(t) * spec.running_cost.eval(x))
}

fn state_rhs(spec: &ProblemSpec, ts: f64, n: usize, x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut f = spec.drift_field(ts, n, x);
    for (a, b) in f.iter_mut().zip(u) {
        *a += b;
    }
    f
}

fn check_controls(u: &ControlTrajectory, x0: &ParticleEnsemble, grid: &TimeGrid) -> Result<()> {
    if u.steps() != grid.steps() {
        return Err(Error::invalid(format!("control trajectory has {} intervals, grid has {}", u.steps(), grid.steps())));
    }
    if (u.n(), u.d()) != (x0.n(), x0.d()) {
        return Err(Error::DimensionMismatch { expected_n: x0.n(), expected_d: x0.d(), found_n: u.n(), found_d: u.d() });
    }
    Ok(())
}

/// Classical RK4 for `ẋ_i = v(t, μ[x], x_i) + u_i`, controls frozen on each interval.
pub fn integrate_forward(
    spec: &ProblemSpec,
    u: &ControlTrajectory,
    x0: &ParticleEnsemble,
    grid: &TimeGrid,
) -> Result<Vec<ParticleEnsemble>> {
    grid.check_spec(spec)?;
    check_controls(u, x0, grid)?;
    if x0.d() != spec.dimension {
        return Err(Error::invalid(format!("ensemble dimension {} differs from problem dimension {}", x0.d(), spec.dimension)));
    }
    let (n, d) = (x0.n(), x0.d());
    let h = grid.step();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(x0.clone());
    let mut x = x0.as_slice().to_vec();
    for k in 0..grid.steps() {
        // schedules are read at the interval midpoint so breakpoints on nodes are resolved exactly
        let ts = grid.midpoint(k);
        let uk = u.interval(k).as_slice();
        let k1 = state_rhs(spec, ts, n, &x, uk);
        let k2 = state_rhs(spec, ts, n, &axpy(&x, 0.5 * h, &k1), uk);
        let k3 = state_rhs(spec, ts, n, &axpy(&x, 0.5 * h, &k2), uk);
        let k4 = state_rhs(spec, ts, n, &axpy(&x, h, &k3), uk);
        for i in 0..n * d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1, time: grid.node(k + 1) });
        }
        out.push(ParticleEnsemble::from_raw(n, d, x.clone()));
    }
    Ok(out)
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(p, q)| p + a * q).collect()
}

/// A priori bound on the support radius along any admissible trajectory:
/// `(R_0 + (M + C_U)T)·exp(2MT)`.
pub fn support_bound(spec: &ProblemSpec, x0: &ParticleEnsemble) -> f64 {
    let m = spec.growth_constant();
    let t = spec.horizon;
    (support_radius(x0) + (m + spec.control_set.max_norm(spec.dimension)) * t) * (2.0 * m * t).exp()
}

/// `−∇^N_x H_N`: the right-hand side of the rescaled costate equation.
fn costate_rhs(spec: &ProblemSpec, ts: f64, n: usize, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    if spec.has_drift() {
        spec.drift_jacobian(ts, n, x).apply_transpose_add(r, &mut g);
    }
    let sl = spec.running_schedule.at(ts);
    if sl != 0.0 && !spec.running_cost.is_zero() {
        let e = ParticleEnsemble::from_raw(n, spec.dimension, x.to_vec());
        let gl = mf_gradient(&spec.running_cost, &e)?.values;
        for (a, b) in g.iter_mut().zip(gl.as_slice()) {
            *a -= sl * b;
        }
    }
    g.iter_mut().for_each(|v| *v = -*v);
    Ok(g)
}

/// Terminal costate `−∇^N φ(x(T))`.
pub fn terminal_costate(final_cost: &Functional, x_t: &ParticleEnsemble) -> Result<RescaledVector> {
    Ok(mf_gradient(final_cost, x_t)?.values.scaled(-1.0))
}

/// Backward RK4 for `ṙ = −∇^N_x H_N` from `r(T) = −∇^N φ(x(T))`.
///
/// States at interval midpoints come from cubic Hermite interpolation of the forward
/// trajectory, which keeps the scheme fourth order.
pub fn integrate_backward(
    spec: &ProblemSpec,
    states: &[ParticleEnsemble],
    u: &ControlTrajectory,
    grid: &TimeGrid,
) -> Result<Vec<RescaledVector>> {
    grid.check_spec(spec)?;
    if states.len() != grid.steps() + 1 {
        return Err(Error::invalid(format!("expected {} states, found {}", grid.steps() + 1, states.len())));
    }
    check_controls(u, &states[0], grid)?;
    let (n, d) = (states[0].n(), states[0].d());
    let m = grid.steps();
    let h = grid.step();
    let mut out = vec![RescaledVector::zeros(n, d); m + 1];
    out[m] = terminal_costate(&spec.final_cost, &states[m])?;
    let constant = !spec.has_drift() && spec.running_cost.is_zero();
    let mut r = out[m].as_slice().to_vec();
    for k in (0..m).rev() {
        if !constant {
            let ts = grid.midpoint(k);
            let uk = u.interval(k).as_slice();
            let (x0, x1) = (states[k].as_slice(), states[k + 1].as_slice());
            let f0 = state_rhs(spec, ts, n, x0, uk);
            let f1 = state_rhs(spec, ts, n, x1, uk);
            let xm: Vec<f64> = (0..n * d).map(|i| 0.5 * (x0[i] + x1[i]) + h * (f0[i] - f1[i]) / 8.0).collect();
            let k1 = costate_rhs(spec, ts, n, x1, &r)?;
            let k2 = costate_rhs(spec, ts, n, &xm, &axpy(&r, -0.5 * h, &k1))?;
            let k3 = costate_rhs(spec, ts, n, &xm, &axpy(&r, -0.5 * h, &k2))?;
            let k4 = costate_rhs(spec, ts, n, x0, &axpy(&r, -h, &k3))?;
            for i in 0..n * d {
                r[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k, time: grid.node(k) });
            }
        }
        out[k] = RescaledVector::from_raw(n, d, r.clone());
    }
    Ok(out)
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 50;

/// `argmax_{u ∈ U} ⟨r_i, u⟩ − ψ(u)`.
pub fn maximize_control(spec: &ProblemSpec, r: &[f64]) -> Result<Vec<f64>> {
    let d = spec.dimension;
    if r.len() != d {
        return Err(Error::invalid(format!("costate entry must have {d} components")));
    }
    let cost = &spec.control_cost;
    let lambda = cost.lambda();
    let mut u: Vec<f64> = r.iter().map(|v| v / lambda).collect();
    if cost.is_quadratic() {
        spec.control_set.project(&mut u);
        return Ok(u);
    }
    let scale = linalg::norm(r).max(1.0);
    match spec.control_set {
        ControlSet::Ball { radius } => {
            // ψ is radial, so the maximiser is parallel to r with |u| solving g'(s) = |r|
            let a = linalg::norm(r);
            if a == 0.0 {
                return Ok(vec![0.0; d]);
            }
            let kappa = cost.kappa();
            let mut s = (a / lambda).min((a / kappa).cbrt());
            let mut res = f64::INFINITY;
            for _ in 0..NEWTON_MAX_ITERS {
                res = cost.radial_slope(s) - a;
                if res.abs() <= NEWTON_TOL * scale {
                    let s = s.min(radius);
                    return Ok(r.iter().map(|v| v * s / a).collect());
                }
                s -= res / (lambda + 3.0 * kappa * s * s);
            }
            Err(Error::Maximization { residual: res.abs(), iterations: NEWTON_MAX_ITERS })
        }
        ControlSet::Box { bound } => {
            spec.control_set.project(&mut u);
            let objective = |u: &[f64]| cost.value(u) - linalg::dot(r, u);
            let mut res = f64::INFINITY;
            for _ in 0..NEWTON_MAX_ITERS {
                let g: Vec<f64> = cost.gradient(&u).iter().zip(r).map(|(a, b)| a - b).collect();
                let free: Vec<usize> = (0..d)
                    .filter(|&k| !((u[k] >= bound && g[k] < 0.0) || (u[k] <= -bound && g[k] > 0.0)))
                    .collect();
                res = free.iter().fold(0.0f64, |m, &k| m.max(g[k].abs()));
                if res <= NEWTON_TOL * scale {
                    return Ok(u);
                }
                let hfull = cost.hessian(&u);
                let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| hfull[free[a] * d + free[b]]);
                let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -g[k]));
                let delta = hff.cholesky().ok_or(Error::Maximization { residual: res, iterations: 0 })?.solve(&rhs);
                let f0 = objective(&u);
                let mut t = 1.0;
                loop {
                    let mut cand = u.clone();
                    for (a, &k) in free.iter().enumerate() {
                        cand[k] += t * delta[a];
                    }
                    spec.control_set.project(&mut cand);
                    let decrease: f64 = cand.iter().zip(&u).zip(&g).map(|((c, o), gk)| gk * (c - o)).sum();
                    let slack = 4.0 * f64::EPSILON * (1.0 + f0.abs());
                    if objective(&cand) <= f0 + 1e-4 * decrease + slack || t < 1e-12 {
                        u = cand;
                        break;
                    }
                    t *= 0.5;
                }
            }
            Err(Error::Maximization { residual: res, iterations: NEWTON_MAX_ITERS })
        }
    }
}

fn maximize_all(spec: &ProblemSpec, r: &RescaledVector) -> Result<RescaledVector> {
    let mut out = Vec::with_capacity(r.as_slice().len());
    for ri in r.entries() {
        out.extend(maximize_control(spec, ri)?);
    }
    Ok(RescaledVector::from_raw(r.n(), r.d(), out))
}

/// Trapezoidal running cost plus the exact integral of the piecewise-constant control cost,
/// plus the final cost.
pub fn total_cost(spec: &ProblemSpec, states: &[ParticleEnsemble], u: &ControlTrajectory, grid: &TimeGrid) -> f64 {
    let m = grid.steps();
    let h = grid.step();
    let n = states[0].n() as f64;
    let mut total = 0.0;
    let running: Vec<f64> = if spec.running_cost.is_zero() {
        vec![0.0; m + 1]
    } else {
        states.iter().map(|x| spec.running_cost.eval(x)).collect()
    };
    for k in 0..m {
        let sl = spec.running_schedule.at(grid.midpoint(k));
        let psi: f64 = u.interval(k).entries().map(|ui| spec.control_cost.value(ui)).sum::<f64>() / n;
        total += h * (0.5 * sl * (running[k] + running[k + 1]) + psi);
    }
    total + spec.final_cost.eval(&states[m])
}

/// Forward–backward sweep parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FbsmOptions {
    pub omega: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FbsmOptions {
    fn default() -> Self {
        Self { omega: 0.3, tol: 1e-9, max_iters: 5000 }
    }
}

impl FbsmOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::invalid("relaxation omega must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FbsmSolution {
    pub triple: PontryaginTriple,
    pub converged: bool,
    pub iterations: usize,
    /// Last value of `max_k |u_new − u|_N`.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Total cost of the iterate entering each sweep.
    pub cost_history: Vec<f64>,
}

impl FbsmSolution {
    pub fn cost(&self) -> f64 {
        *self.cost_history.last().expect("at least one sweep")
    }
}

/// Damped fixed-point iteration on the maximisation condition, starting from `u ≡ 0`.
pub fn solve_fbsm(spec: &ProblemSpec, x0: &ParticleEnsemble, grid: &TimeGrid, opts: &FbsmOptions) -> Result<FbsmSolution> {
    spec.validate()?;
    opts.validate()?;
    grid.check_spec(spec)?;
    let (n, d) = (x0.n(), x0.d());
    let m = grid.steps();
    let mut u = ControlTrajectory::zeros(m, n, d);
    let mut residual_history = Vec::new();
    let mut cost_history = Vec::new();
    let mut best: Option<(f64, PontryaginTriple)> = None;
    for iter in 1..=opts.max_iters {
        let states = integrate_forward(spec, &u, x0, grid)?;
        let costates = integrate_backward(spec, &states, &u, grid)?;
        cost_history.push(total_cost(spec, &states, &u, grid));
        let mut new = Vec::with_capacity(m);
        let mut residual: f64 = 0.0;
        for k in 0..m {
            let rbar = (&costates[k] + &costates[k + 1]).scaled(0.5);
            let uk = maximize_all(spec, &rbar)?;
            residual = residual.max(norm_n(&(&uk - u.interval(k))));
            new.push(uk);
        }
        residual_history.push(residual);
        let triple = PontryaginTriple { grid: *grid, states, costates, controls: u.clone() };
        if residual <= opts.tol {
            log::debug!("fbsm converged after {iter} sweeps, residual {residual:e}");
            return Ok(FbsmSolution { triple, converged: true, iterations: iter, residual, residual_history, cost_history });
        }
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, triple));
        }
        let omega = opts.omega;
        let updated = u
            .intervals
            .iter()
            .zip(&new)
            .map(|(old, nw)| {
                let mut v = old.scaled(1.0 - omega);
                v.axpy(omega, nw);
                v
            })
            .collect();
        u = ControlTrajectory { intervals: updated };
    }
    let (residual, triple) = best.expect("at least one sweep");
    log::warn!("fbsm stopped after {} sweeps, best residual {residual:e}", opts.max_iters);
    Ok(FbsmSolution { triple, converged: false, iterations: opts.max_iters, residual, residual_history, cost_history })
}

/// `max_k |u_k − maximize_control(r̄_k)|_N` along a triple.
pub fn pmp_residual(spec: &ProblemSpec, triple: &PontryaginTriple) -> Result<f64> {
    let mut res: f64 = 0.0;
    for k in 0..triple.grid.steps() {
        let rbar = (&triple.costates[k] + &triple.costates[k + 1]).scaled(0.5);
        let uk = maximize_all(spec, &rbar)?;
        res = res.max(norm_n(&(&uk - triple.controls.interval(k))));
    }
    Ok(res)
}
