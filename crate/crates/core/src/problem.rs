//! Problem descriptors: drift, running/final/control costs, control set, horizon.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{ParticleEnsemble, RescaledVector};
use crate::mfcalc::{Functional, MfHessianOperator};

/// One term of the drift `v(t, μ, x)`; the drift is the scheduled sum of its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftTerm {
    /// `v = value`.
    Constant { value: Vec<f64> },
    /// `v = A·x`, `matrix` given by rows.
    Linear { matrix: Vec<Vec<f64>> },
    /// `v = a·(x̄ − x)`.
    Attraction { strength: f64 },
    /// `v = ∫K(x − y)dμ(y)` with `K(z) = −a·z`.
    ConvolutionLinear { strength: f64 },
    /// `v = ∫K(x − y)dμ(y)` with `K(z) = a·z·exp(−|z|²/(2σ²))`.
    ConvolutionGaussian { strength: f64, sigma: f64 },
}

/// Scalar convex control cost ψ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlCost {
    /// `(λ/2)|u|²`
    Quadratic { lambda: f64 },
    /// `(λ/2)|u|² + (κ/4)|u|⁴`
    QuadraticQuartic { lambda: f64, kappa: f64 },
}

/// Admissible control values `U`, centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSet {
    /// `[−bound, bound]^d`
    Box { bound: f64 },
    /// `{|u| ≤ radius}`
    Ball { radius: f64 },
}

/// Piecewise-constant coefficient in time: `values[k]` on `[breakpoints[k-1], breakpoints[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { breakpoints: Vec::new(), values: vec![1.0] }
    }
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self { breakpoints: Vec::new(), values: vec![value] }
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = self.breakpoints.iter().take_while(|b| **b <= t).count();
        self.values[k]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.values.len() != self.breakpoints.len() + 1 {
            return Err(Error::invalid(format!("{what}: need exactly one more value than breakpoints")));
        }
        if self.values.iter().chain(&self.breakpoints).any(|v| !v.is_finite())
            || self.breakpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(format!("{what}: breakpoints must be finite and strictly increasing")));
        }
        Ok(())
    }
}

impl ControlCost {
    pub fn lambda(&self) -> f64 {
        match *self {
            ControlCost::Quadratic { lambda } | ControlCost::QuadraticQuartic { lambda, .. } => lambda,
        }
    }

    pub fn kappa(&self) -> f64 {
        match *self {
            ControlCost::Quadratic { .. } => 0.0,
            ControlCost::QuadraticQuartic { kappa, .. } => kappa,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        self.kappa() == 0.0
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let s = linalg::dot(u, u);
        0.5 * self.lambda() * s + 0.25 * self.kappa() * s * s
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let c = self.lambda() + self.kappa() * linalg::dot(u, u);
        u.iter().map(|v| c * v).collect()
    }

    /// `∇²ψ(u)`, row-major.
    pub fn hessian(&self, u: &[f64]) -> Vec<f64> {
        let d = u.len();
        let k = self.kappa();
        let mut h = linalg::identity(d, self.lambda() + k * linalg::dot(u, u));
        for p in 0..d {
            for q in 0..d {
                h[p * d + q] += 2.0 * k * u[p] * u[q];
            }
        }
        h
    }

    /// Radial derivative `g'(s)` for `ψ(u) = g(|u|)`.
    pub(crate) fn radial_slope(&self, s: f64) -> f64 {
        self.lambda() * s + self.kappa() * s * s * s
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda().is_finite() && self.kappa().is_finite() && self.kappa() >= 0.0) {
            return Err(Error::invalid("control cost coefficients must be finite with kappa >= 0"));
        }
        Ok(())
    }
}

impl ControlSet {
    /// The bound `C`.
    pub fn bound(&self) -> f64 {
        match *self {
            ControlSet::Box { bound } => bound,
            ControlSet::Ball { radius } => radius,
        }
    }

    /// `sup_{u ∈ U} |u|`.
    pub fn max_norm(&self, d: usize) -> f64 {
        match *self {
            ControlSet::Box { bound } => bound * (d as f64).sqrt(),
            ControlSet::Ball { radius } => radius,
        }
    }

    pub fn contains(&self, u: &[f64], slack: f64) -> bool {
        match *self {
            ControlSet::Box { bound } => u.iter().all(|v| v.abs() <= bound + slack),
            ControlSet::Ball { radius } => linalg::norm(u) <= radius + slack,
        }
    }

    /// Euclidean projection onto `U`.
    pub fn project(&self, u: &mut [f64]) {
        match *self {
            ControlSet::Box { bound } => u.iter_mut().for_each(|v| *v = v.clamp(-bound, bound)),
            ControlSet::Ball { radius } => {
                let n = linalg::norm(u);
                if n > radius {
                    u.iter_mut().for_each(|v| *v *= radius / n);
                }
            }
        }
    }

    /// Whether coordinate `k` of `u` sits on the boundary of `U`.
    pub fn is_active(&self, u: &[f64], k: usize, tol: f64) -> bool {
        match *self {
            ControlSet::Box { bound } => u[k].abs() >= bound - tol,
            ControlSet::Ball { radius } => linalg::norm(u) >= radius - tol,
        }
    }

    /// Deterministic sample grid of `U` with an odd number of points per axis (contains 0).
    pub fn grid(&self, d: usize) -> Vec<Vec<f64>> {
        let per_axis: usize = match d {
            1 => 41,
            2 => 21,
            3 => 11,
            _ => 5,
        };
        let c = self.bound();
        let total = per_axis.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|_| {
                        let s = idx % per_axis;
                        idx /= per_axis;
                        -c + 2.0 * c * s as f64 / (per_axis - 1) as f64
                    })
                    .collect::<Vec<f64>>()
            })
            .filter(|u| self.contains(u, 1e-12))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let c = self.bound();
        if !c.is_finite() || c < 0.0 {
            return Err(Error::invalid("control bound must be finite and non-negative"));
        }
        if c == 0.0 {
            return Err(Error::invalid("control set is degenerate (bound 0)"));
        }
        Ok(())
    }
}

/// Full description of the control problem on `[0, T]` in `R^d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
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
    pub horizon: f64,
}

impl ProblemSpec {
    /// Structural checks: dimensions, positivity of horizon and bound, well-formed schedules.
    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive and finite"));
        }
        self.control_set.validate()?;
        self.control_cost.validate()?;
        self.drift_schedule.validate("drift schedule")?;
        self.running_schedule.validate("running-cost schedule")?;
        self.running_cost.validate(d)?;
        self.final_cost.validate(d)?;
        for t in &self.drift {
            match t {
                DriftTerm::Constant { value } if value.len() != d => {
                    return Err(Error::invalid(format!("constant drift must have {d} entries")))
                }
                DriftTerm::Linear { matrix } if matrix.len() != d || matrix.iter().any(|r| r.len() != d) => {
                    return Err(Error::invalid(format!("linear drift matrix must be {d}x{d}")))
                }
                DriftTerm::ConvolutionGaussian { sigma, .. } if !(*sigma > 0.0) => {
                    return Err(Error::invalid("convolution sigma must be positive"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Analytic growth constant `M` with `|v(t,μ,x)| ≤ M(1 + |x| + ∫|y|dμ)`.
    pub fn growth_constant(&self) -> f64 {
        let s = self.drift_schedule.max_abs();
        let sum: f64 = self
            .drift
            .iter()
            .map(|t| match t {
                DriftTerm::Constant { value } => linalg::norm(value),
                DriftTerm::Linear { matrix } => linalg::spectral_norm(&flatten(matrix), self.dimension),
                DriftTerm::Attraction { strength } | DriftTerm::ConvolutionLinear { strength } => strength.abs(),
                DriftTerm::ConvolutionGaussian { strength, sigma } => strength.abs() * sigma * (-0.5f64).exp(),
            })
            .sum();
        s * sum
    }

    pub fn has_drift(&self) -> bool {
        !self.drift.is_empty() && self.drift_schedule.values.iter().any(|v| *v != 0.0)
    }

    /// Drift field `(v(t, μ[x], x_i))_i` as a flat `N·d` array.
    pub fn drift_field(&self, t: f64, n: usize, x: &[f64]) -> Vec<f64> {
        let d = self.dimension;
        let mut out = vec![0.0; n * d];
        let s = self.drift_schedule.at(t);
        if s == 0.0 || self.drift.is_empty() {
            return out;
        }
        let mean = mean_of(x, n, d);
        for term in &self.drift {
            match term {
                DriftTerm::Constant { value } => {
                    for i in 0..n {
                        for k in 0..d {
                            out[i * d + k] += s * value[k];
                        }
                    }
                }
                DriftTerm::Linear { matrix } => {
                    let a = flatten(matrix);
                    for i in 0..n {
                        let mut v = vec![0.0; d];
                        linalg::matvec_add(&a, &x[i * d..(i + 1) * d], &mut v);
                        for k in 0..d {
                            out[i * d + k] += s * v[k];
                        }
                    }
                }
                DriftTerm::Attraction { strength } | DriftTerm::ConvolutionLinear { strength } => {
                    for i in 0..n {
                        for k in 0..d {
                            out[i * d + k] += s * strength * (mean[k] - x[i * d + k]);
                        }
                    }
                }
                DriftTerm::ConvolutionGaussian { strength, sigma } => {
                    for i in 0..n {
                        for j in 0..n {
                            let z: Vec<f64> = (0..d).map(|k| x[i * d + k] - x[j * d + k]).collect();
                            let g = gauss(&z, *sigma);
                            for k in 0..d {
                                out[i * d + k] += s * strength * z[k] * g / n as f64;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Linearisation of the drift field at `x`.
    pub fn drift_jacobian(&self, t: f64, n: usize, x: &[f64]) -> DriftJacobian {
        let d = self.dimension;
        let dd = d * d;
        let mut jac = DriftJacobian::zeros(n, d);
        let s = self.drift_schedule.at(t);
        if s == 0.0 {
            return jac;
        }
        for term in &self.drift {
            match term {
                DriftTerm::Constant { .. } => {}
                DriftTerm::Linear { matrix } => {
                    let a = flatten(matrix);
                    for block in jac.diag.chunks_exact_mut(dd) {
                        for (j, a) in block.iter_mut().zip(&a) {
                            *j += s * a;
                        }
                    }
                }
                DriftTerm::Attraction { strength } | DriftTerm::ConvolutionLinear { strength } => {
                    for i in 0..n {
                        for p in 0..d {
                            jac.diag[i * dd + p * d + p] -= s * strength;
                        }
                    }
                    for p in 0..d {
                        jac.mean_coupling[p * d + p] += s * strength;
                    }
                }
                DriftTerm::ConvolutionGaussian { strength, sigma } => {
                    let nf = n as f64;
                    let pw = jac.pairwise.get_or_insert_with(|| vec![0.0; n * n * dd]);
                    for i in 0..n {
                        for j in 0..n {
                            let z: Vec<f64> = (0..d).map(|k| x[i * d + k] - x[j * d + k]).collect();
                            let dk = gaussian_kernel_jacobian(*strength, *sigma, &z);
                            for k in 0..dd {
                                jac.diag[i * dd + k] += s * dk[k] / nf;
                                pw[(i * n + j) * dd + k] -= s * dk[k] / nf;
                            }
                        }
                    }
                }
            }
        }
        jac
    }

    /// Plain Hessian in `x` of `(1/N) Σ_i ⟨r_i, v(t, μ[x], x_i)⟩`, as mean-field blocks.
    pub fn drift_state_hessian(&self, t: f64, n: usize, x: &[f64], r: &[f64]) -> MfHessianOperator {
        let d = self.dimension;
        let dd = d * d;
        let mut op = MfHessianOperator::zeros(n, d);
        let s = self.drift_schedule.at(t);
        for term in &self.drift {
            if let DriftTerm::ConvolutionGaussian { strength, sigma } = term {
                let mut sm = vec![0.0; n * n * dd];
                for i in 0..n {
                    for j in 0..n {
                        let z: Vec<f64> = (0..d).map(|k| x[i * d + k] - x[j * d + k]).collect();
                        let h = gaussian_kernel_pairing_hessian(*strength, *sigma, &z, &r[i * d..(i + 1) * d]);
                        sm[(i * n + j) * dd..(i * n + j + 1) * dd].copy_from_slice(&h);
                    }
                }
                let nf = n as f64;
                let mut diag = vec![0.0; n * dd];
                let mut pair = vec![0.0; n * n * dd];
                for a in 0..n {
                    for b in 0..n {
                        for k in 0..dd {
                            let v = sm[(a * n + b) * dd + k] + sm[(b * n + a) * dd + k];
                            diag[a * dd + k] += s * v / nf;
                            pair[(a * n + b) * dd + k] -= s * v;
                        }
                    }
                }
                let part = MfHessianOperator::from_blocks(n, d, diag, pair).expect("block sizes are consistent");
                op.add_scaled(1.0, &part);
            }
        }
        op
    }
}

/// `v(t, μ[x], x_i)`.
pub fn eval_drift(spec: &ProblemSpec, t: f64, mu: &ParticleEnsemble, i: usize) -> Vec<f64> {
    let d = spec.dimension;
    spec.drift_field(t, mu.n(), mu.as_slice())[i * d..(i + 1) * d].to_vec()
}

/// Linearised drift blocks: `(A y)_i = diag_i y_i + Σ_j measure_block(i, j) y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftJacobian {
    n: usize,
    d: usize,
    diag: Vec<f64>,
    /// `N` times a measure block shared by every pair.
    mean_coupling: Vec<f64>,
    pairwise: Option<Vec<f64>>,
}

impl DriftJacobian {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, diag: vec![0.0; n * d * d], mean_coupling: vec![0.0; d * d], pairwise: None }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `D_x v(t, μ[x], x_i)`.
    pub fn diag_block(&self, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.diag[i * dd..(i + 1) * dd]
    }

    /// `(1/N) D_μ v(t, μ[x], x_i)(x_j)`.
    pub fn measure_block(&self, i: usize, j: usize) -> Vec<f64> {
        let dd = self.d * self.d;
        let mut b: Vec<f64> = self.mean_coupling.iter().map(|v| v / self.n as f64).collect();
        if let Some(pw) = &self.pairwise {
            let o = (i * self.n + j) * dd;
            for (bk, pk) in b.iter_mut().zip(&pw[o..o + dd]) {
                *bk += pk;
            }
        }
        b
    }

    pub fn is_zero(&self) -> bool {
        self.diag.iter().chain(&self.mean_coupling).all(|v| *v == 0.0)
            && self.pairwise.as_ref().is_none_or(|p| p.iter().all(|v| *v == 0.0))
    }

    /// `out += A y`.
    pub fn apply_add(&self, y: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let dd = d * d;
        for i in 0..n {
            linalg::matvec_add(&self.diag[i * dd..(i + 1) * dd], &y[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
        if self.mean_coupling.iter().any(|v| *v != 0.0) {
            let m = mean_of(y, n, d);
            let mut c = vec![0.0; d];
            linalg::matvec_add(&self.mean_coupling, &m, &mut c);
            for i in 0..n {
                for k in 0..d {
                    out[i * d + k] += c[k];
                }
            }
        }
        if let Some(pw) = &self.pairwise {
            for i in 0..n {
                for j in 0..n {
                    let o = (i * n + j) * dd;
                    linalg::matvec_add(&pw[o..o + dd], &y[j * d..(j + 1) * d], &mut out[i * d..(i + 1) * d]);
                }
            }
        }
    }

    /// `out += Aᵀ r`.
    pub fn apply_transpose_add(&self, r: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let dd = d * d;
        for i in 0..n {
            linalg::matvec_t_add(&self.diag[i * dd..(i + 1) * dd], &r[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
        if self.mean_coupling.iter().any(|v| *v != 0.0) {
            let m = mean_of(r, n, d);
            let mut c = vec![0.0; d];
            linalg::matvec_t_add(&self.mean_coupling, &m, &mut c);
            for j in 0..n {
                for k in 0..d {
                    out[j * d + k] += c[k];
                }
            }
        }
        if let Some(pw) = &self.pairwise {
            for i in 0..n {
                for j in 0..n {
                    let o = (i * n + j) * dd;
                    linalg::matvec_t_add(&pw[o..o + dd], &r[i * d..(i + 1) * d], &mut out[j * d..(j + 1) * d]);
                }
            }
        }
    }

    /// Dense `Nd × Nd` matrix of `A`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.n * self.d;
        let mut a = DMatrix::zeros(m, m);
        let mut e = vec![0.0; m];
        for c in 0..m {
            e[c] = 1.0;
            let mut col = vec![0.0; m];
            self.apply_add(&e, &mut col);
            e[c] = 0.0;
            for (r, v) in col.into_iter().enumerate() {
                a[(r, c)] = v;
            }
        }
        a
    }
}

pub(crate) fn flatten(matrix: &[Vec<f64>]) -> Vec<f64> {
    matrix.iter().flatten().copied().collect()
}

pub(crate) fn mean_of(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for c in x.chunks_exact(d) {
        for k in 0..d {
            m[k] += c[k];
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

fn gauss(z: &[f64], sigma: f64) -> f64 {
    (-linalg::dot(z, z) / (2.0 * sigma * sigma)).exp()
}

/// `DK(z)` for `K(z) = a z g(z)`.
fn gaussian_kernel_jacobian(a: f64, sigma: f64, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let s2 = sigma * sigma;
    let g = a * gauss(z, sigma);
    let mut m = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            m[p * d + q] = g * (if p == q { 1.0 } else { 0.0 } - z[p] * z[q] / s2);
        }
    }
    m
}

/// Hessian of `z ↦ ⟨r, K(z)⟩` for `K(z) = a z g(z)`.
fn gaussian_kernel_pairing_hessian(a: f64, sigma: f64, z: &[f64], r: &[f64]) -> Vec<f64> {
    let d = z.len();
    let s2 = sigma * sigma;
    let c = a * gauss(z, sigma) / s2;
    let rz = linalg::dot(r, z);
    let mut m = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            m[p * d + q] = c
                * (-z[q] * r[p] - z[p] * r[q] + rz * z[p] * z[q] / s2 - if p == q { rz } else { 0.0 });
        }
    }
    m
}

/// Constants recorded by [`validate_hypotheses`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// `U` compact, convex, with non-empty interior.
    pub control_set_ok: bool,
    /// Minimal eigenvalue of `∇²ψ` over a grid of `U`.
    pub lambda_psi: f64,
    /// Growth constant `M` of the drift.
    pub growth_constant: f64,
    /// Largest sampled ratio `|v| / (1 + |x| + ∫|y|dμ)`.
    pub sampled_growth_ratio: f64,
    /// `sup_{u ∈ U} |u|`.
    pub control_bound: f64,
}

/// Checks the standing hypotheses: compact convex `U`, strict convexity of ψ, drift growth.
pub fn validate_hypotheses(spec: &ProblemSpec) -> Result<HypothesisReport> {
    spec.validate().map_err(|e| match e {
        Error::InvalidInput(m) if m.contains("control set") || m.contains("control bound") => {
            Error::Hypothesis { tag: "H-i".into(), message: m }
        }
        other => other,
    })?;
    let d = spec.dimension;
    let lambda_psi = spec
        .control_set
        .grid(d)
        .iter()
        .map(|u| {
            let h = DMatrix::from_row_slice(d, d, &spec.control_cost.hessian(u));
            linalg::sym_eig_range(&h).0
        })
        .fold(f64::INFINITY, f64::min);
    if !(lambda_psi > 0.0) {
        return Err(Error::Hypothesis {
            tag: "H-ii".into(),
            message: format!("control cost is not strictly convex on U (min Hessian eigenvalue {lambda_psi})"),
        });
    }

    let m = spec.growth_constant();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut ratio: f64 = 0.0;
    let mut times = vec![0.0, spec.horizon];
    times.extend(spec.drift_schedule.breakpoints.iter().copied());
    for _ in 0..16 {
        let n = rng.gen_range(1..6);
        let scale = 10f64.powi(rng.gen_range(-1..3));
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect();
        let first_moment = x.chunks_exact(d).map(linalg::norm).sum::<f64>() / n as f64;
        for &t in &times {
            let v = spec.drift_field(t, n, &x);
            for (vi, xi) in v.chunks_exact(d).zip(x.chunks_exact(d)) {
                ratio = ratio.max(linalg::norm(vi) / (1.0 + linalg::norm(xi) + first_moment));
            }
        }
    }
    if ratio > m * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Hypothesis {
            tag: "H-iii".into(),
            message: format!("drift growth ratio {ratio} exceeds the recorded constant {m}"),
        });
    }
    Ok(HypothesisReport {
        control_set_ok: true,
        lambda_psi,
        growth_constant: m,
        sampled_growth_ratio: ratio,
        control_bound: spec.control_set.max_norm(d),
    })
}

/// Central-difference Jacobian of the drift field; used to cross-check closed forms.
pub fn fd_drift_jacobian(spec: &ProblemSpec, t: f64, n: usize, x: &[f64], step: f64) -> DMatrix<f64> {
    let m = n * spec.dimension;
    let mut a = DMatrix::zeros(m, m);
    let mut xp = x.to_vec();
    for c in 0..m {
        xp[c] = x[c] + step;
        let fp = spec.drift_field(t, n, &xp);
        xp[c] = x[c] - step;
        let fm = spec.drift_field(t, n, &xp);
        xp[c] = x[c];
        for r in 0..m {
            a[(r, c)] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    a
}

/// Pairing `(1/N) Σ_i ⟨r_i, v_i⟩` used by tests and the Hamiltonian.
pub fn drift_pairing(spec: &ProblemSpec, t: f64, x: &ParticleEnsemble, r: &RescaledVector) -> f64 {
    let v = spec.drift_field(t, x.n(), x.as_slice());
    linalg::dot(&v, r.as_slice()) / x.n() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfcalc::Term;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn base(d: usize) -> ProblemSpec {
        ProblemSpec {
            dimension: d,
            drift: vec![],
            drift_schedule: Schedule::default(),
            running_cost: Functional::zero(),
            running_schedule: Schedule::default(),
            final_cost: Functional::zero(),
            control_cost: ControlCost::Quadratic { lambda: 2.0 },
            control_set: ControlSet::Box { bound: 1.0 },
            horizon: 1.0,
        }
    }

    fn variance_spec(lambda: f64) -> ProblemSpec {
        ProblemSpec {
            final_cost: Term::Variance { coef: -0.5 }.into(),
            control_cost: ControlCost::Quadratic { lambda },
            ..base(1)
        }
    }

    fn all_drifts(d: usize) -> Vec<DriftTerm> {
        vec![
            DriftTerm::Constant { value: vec![0.3; d] },
            DriftTerm::Linear {
                matrix: (0..d).map(|p| (0..d).map(|q| 0.2 * (p as f64 + 1.0) - 0.5 * q as f64).collect()).collect(),
            },
            DriftTerm::Attraction { strength: 0.7 },
            DriftTerm::ConvolutionLinear { strength: -0.4 },
            DriftTerm::ConvolutionGaussian { strength: 1.1, sigma: 0.6 },
        ]
    }

    #[test]
    fn hypotheses_examples() {
        let r = validate_hypotheses(&variance_spec(2.0)).unwrap();
        assert_eq!(r.lambda_psi, 2.0);
        assert_eq!(r.growth_constant, 0.0);

        let mut s = variance_spec(2.0);
        s.control_set = ControlSet::Box { bound: 0.0 };
        assert!(matches!(validate_hypotheses(&s), Err(Error::Hypothesis { tag, .. }) if tag == "H-i"));

        let mut s = variance_spec(-1.0);
        s.control_set = ControlSet::Ball { radius: 1.0 };
        assert!(matches!(validate_hypotheses(&s), Err(Error::Hypothesis { tag, .. }) if tag == "H-ii"));

        let mut s = base(2);
        s.control_cost = ControlCost::QuadraticQuartic { lambda: 0.5, kappa: 3.0 };
        s.drift = all_drifts(2);
        let r = validate_hypotheses(&s).unwrap();
        assert!((r.lambda_psi - 0.5).abs() < 1e-14);
        assert!(r.sampled_growth_ratio <= r.growth_constant);
    }

    #[test]
    fn non_c2_cost_is_not_expressible() {
        let cfg = r#"{"kind":"absolute","lambda":1.0}"#;
        assert!(serde_json::from_str::<ControlCost>(cfg).is_err());
    }

    #[test]
    fn drift_examples() {
        let mu = ParticleEnsemble::from_1d(&[0.0, 2.0]).unwrap();
        assert_eq!(eval_drift(&base(1), 0.0, &mu, 0), vec![0.0]);

        let mut s = base(1);
        s.drift = vec![DriftTerm::Linear { matrix: vec![vec![1.0]] }];
        assert_eq!(eval_drift(&s, 0.0, &ParticleEnsemble::from_1d(&[1.0]).unwrap(), 0), vec![1.0]);

        s.drift = vec![DriftTerm::Attraction { strength: 1.0 }];
        assert_eq!(eval_drift(&s, 0.0, &mu, 0), vec![1.0]);
        assert_eq!(eval_drift(&s, 0.0, &mu, 1), vec![-1.0]);
    }

    #[test]
    fn schedule_switches_at_breakpoints() {
        let sch = Schedule { breakpoints: vec![0.5], values: vec![1.0, -2.0] };
        assert_eq!(sch.at(0.0), 1.0);
        assert_eq!(sch.at(0.4999), 1.0);
        assert_eq!(sch.at(0.5), -2.0);
        let mut s = base(1);
        s.drift = vec![DriftTerm::Constant { value: vec![1.0] }];
        s.drift_schedule = sch;
        let mu = ParticleEnsemble::from_1d(&[0.0]).unwrap();
        assert_eq!(eval_drift(&s, 0.75, &mu, 0), vec![-2.0]);
        s.drift_schedule = Schedule { breakpoints: vec![0.5, 0.2], values: vec![1.0, 2.0, 3.0] };
        assert!(s.validate().is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in 1..=2 {
            let mut s = base(d);
            s.drift = all_drifts(d);
            let n = 5;
            let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = s.drift_jacobian(0.0, n, &x).to_matrix();
            let fd = fd_drift_jacobian(&s, 0.0, n, &x, 1e-5);
            assert!((&a - &fd).amax() < 1e-8, "d={d}");
        }
    }

    #[test]
    fn attraction_blocks() {
        let mut s = base(1);
        s.drift = vec![DriftTerm::Attraction { strength: 2.0 }];
        let jac = s.drift_jacobian(0.0, 4, &[0.0, 1.0, 2.0, 5.0]);
        assert_eq!(jac.diag_block(2), &[-2.0]);
        assert_eq!(jac.measure_block(1, 3), vec![0.5]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = base(2);
        s.drift = all_drifts(2);
        let n = 4;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jac = s.drift_jacobian(0.0, n, &x);
        let mut ay = vec![0.0; n * 2];
        jac.apply_add(&y, &mut ay);
        let mut atr = vec![0.0; n * 2];
        jac.apply_transpose_add(&r, &mut atr);
        assert!((linalg::dot(&ay, &r) - linalg::dot(&y, &atr)).abs() < 1e-13);
    }

    #[test]
    fn state_hessian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in 1..=2 {
            let mut s = base(d);
            s.drift = all_drifts(d);
            let n = 4;
            let x = ParticleEnsemble::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = RescaledVector::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let op = s.drift_state_hessian(0.0, n, x.as_slice(), r.as_slice());
            let fd = crate::mfcalc::fd_plain_hessian(&|e| drift_pairing(&s, 0.0, e, &r), &x, 1e-3);
            assert!((op.plain_matrix() - fd).amax() < 1e-6, "d={d}");
        }
    }

    #[test]
    fn growth_bound_is_sharp_for_linear() {
        let mut s = base(1);
        s.drift = vec![DriftTerm::Linear { matrix: vec![vec![-3.0]] }];
        let r = validate_hypotheses(&s).unwrap();
        assert_eq!(r.growth_constant, 3.0);
        assert!(r.sampled_growth_ratio > 1.0);
    }

    proptest! {
        #[test]
        fn drift_is_permutation_equivariant(xs in prop::collection::vec(-2.0f64..2.0, 6), shift in 1usize..6) {
            let mut s = base(2);
            s.drift = all_drifts(2);
            let n = 3;
            let v = s.drift_field(0.3, n, &xs);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let px: Vec<f64> = perm.iter().flat_map(|&i| xs[2 * i..2 * i + 2].to_vec()).collect();
            let pv = s.drift_field(0.3, n, &px);
            for (a, &i) in perm.iter().enumerate() {
                for k in 0..2 {
                    prop_assert!((pv[2 * a + k] - v[2 * i + k]).abs() < 1e-13);
                }
            }
        }

        #[test]
        fn quadratic_lambda_is_recorded(lambda in 0.01f64..10.0, c in 0.1f64..5.0, d in 1usize..4) {
            let mut s = base(d);
            s.control_cost = ControlCost::Quadratic { lambda };
            s.control_set = ControlSet::Ball { radius: c };
            prop_assert_eq!(validate_hypotheses(&s).unwrap().lambda_psi, lambda);
        }
    }
}
