//! Mean-field derivatives of symmetric functionals at empirical measures.
//!
//! For `φ_N(x) = φ(μ[x])` the mean-field gradient is the per-particle
//! Wasserstein gradient `(∇_μφ(μ[x])(x_i))_i`, which equals `N ∂φ_N/∂x_i`.
//! The Hessian bilinear form is
//!
//! ```text
//! B(h¹, h²) = (1/N) Σ_i ⟨D_x∇_μφ(x_i) h¹_i, h²_i⟩ + (1/N²) Σ_{i,j} ⟨D²_μφ(x_i, x_j) h¹_i, h²_j⟩
//! ```
//!
//! with plain Euclidean brackets in both sums, so that
//! `φ_N(x + h) = φ_N(x) + ⟨∇^N φ_N(x), h⟩_N + ½ B(h, h) + o(|h|_N²)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{ParticleEnsemble, RescaledVector};

/// Finite-difference step for gradients.
pub const FD_GRADIENT_STEP: f64 = 1e-4;
/// Finite-difference step for Hessians.
pub const FD_HESSIAN_STEP: f64 = 1e-3;

/// User-supplied functional, available through the library API only.
///
/// Only pointwise evaluation is mandatory; derivatives that are not provided
/// are reconstructed by central finite differences and flagged as such.
pub trait CustomFunctional: Send + Sync {
    fn name(&self) -> &str;
    fn eval(&self, x: &ParticleEnsemble) -> f64;
    fn mf_gradient(&self, _x: &ParticleEnsemble) -> Option<RescaledVector> {
        None
    }
    fn mf_hessian(&self, _x: &ParticleEnsemble) -> Option<MfHessianOperator> {
        None
    }
}

/// One built-in symmetric functional with closed-form derivatives.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Term {
    /// `φ(μ) = value`.
    Constant { value: f64 },
    /// `φ(μ) = ⟨c, ∫x dμ⟩`.
    LinearInMean { coef: Vec<f64> },
    /// `φ(μ) = ∫ coef·|x − center|² dμ`.
    PotentialQuadratic {
        coef: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// `φ(μ) = ∫ amplitude·exp(−|x − center|²/(2σ²)) dμ`.
    PotentialGaussian {
        amplitude: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// `φ(μ) = coef·∫|x − x̄|² dμ`.
    Variance { coef: f64 },
    /// `φ(μ) = ∬ (coef/2)|x − y|² dμ dμ`.
    InteractionQuadratic { coef: f64 },
    /// `φ(μ) = ∬ amplitude·exp(−|x − y|²/(2σ²)) dμ dμ`.
    InteractionGaussian { amplitude: f64, sigma: f64 },
    #[serde(skip)]
    Custom(Arc<dyn CustomFunctional>),
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Custom(c) => write!(f, "Custom({})", c.name()),
            other => f.write_str(&term_label(other)),
        }
    }
}

fn term_label(t: &Term) -> String {
    match t {
        Term::Constant { value } => format!("Constant({value})"),
        Term::LinearInMean { coef } => format!("LinearInMean({coef:?})"),
        Term::PotentialQuadratic { coef, center } => format!("PotentialQuadratic({coef}, {center:?})"),
        Term::PotentialGaussian { amplitude, sigma, center } => {
            format!("PotentialGaussian({amplitude}, {sigma}, {center:?})")
        }
        Term::Variance { coef } => format!("Variance({coef})"),
        Term::InteractionQuadratic { coef } => format!("InteractionQuadratic({coef})"),
        Term::InteractionGaussian { amplitude, sigma } => format!("InteractionGaussian({amplitude}, {sigma})"),
        Term::Custom(c) => format!("Custom({})", c.name()),
    }
}

/// A functional built as a sum of [`Term`]s. The empty sum is the zero functional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Functional {
    pub terms: Vec<Term>,
}

impl From<Term> for Functional {
    fn from(t: Term) -> Self {
        Functional { terms: vec![t] }
    }
}

impl From<Vec<Term>> for Functional {
    fn from(terms: Vec<Term>) -> Self {
        Functional { terms }
    }
}

impl Functional {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_custom(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Custom(_)))
    }

    /// Checks parameter dimensions and positivity against the state dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        for t in &self.terms {
            match t {
                Term::LinearInMean { coef } if coef.len() != d => {
                    return Err(Error::invalid(format!("linear-in-mean coefficient must have {d} entries")))
                }
                Term::PotentialQuadratic { center: Some(c), .. } | Term::PotentialGaussian { center: Some(c), .. }
                    if c.len() != d =>
                {
                    return Err(Error::invalid(format!("potential center must have {d} entries")))
                }
                Term::PotentialGaussian { sigma, .. } | Term::InteractionGaussian { sigma, .. } if !(*sigma > 0.0) => {
                    return Err(Error::invalid("gaussian width sigma must be positive"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// `φ_N(x) = φ(μ[x])`.
    pub fn eval(&self, x: &ParticleEnsemble) -> f64 {
        self.terms.iter().map(|t| term_value(t, x)).sum()
    }
}

fn center_of(center: &Option<Vec<f64>>, d: usize) -> Vec<f64> {
    center.clone().unwrap_or_else(|| vec![0.0; d])
}

fn gaussian(z2: f64, sigma: f64) -> f64 {
    (-z2 / (2.0 * sigma * sigma)).exp()
}

/// `∇²` of `amplitude·exp(−|z|²/(2σ²))`, row-major.
fn gaussian_hessian(amplitude: f64, sigma: f64, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let s2 = sigma * sigma;
    let g = amplitude * gaussian(linalg::dot(z, z), sigma);
    let mut h = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            h[p * d + q] = g * (z[p] * z[q] / (s2 * s2) - if p == q { 1.0 / s2 } else { 0.0 });
        }
    }
    h
}

fn term_value(t: &Term, x: &ParticleEnsemble) -> f64 {
    let n = x.n() as f64;
    let d = x.d();
    match t {
        Term::Constant { value } => *value,
        Term::LinearInMean { coef } => linalg::dot(coef, &x.mean()),
        Term::PotentialQuadratic { coef, center } => {
            let c = center_of(center, d);
            coef * x.particles().map(|p| linalg::dist(p, &c).powi(2)).sum::<f64>() / n
        }
        Term::PotentialGaussian { amplitude, sigma, center } => {
            let c = center_of(center, d);
            amplitude * x.particles().map(|p| gaussian(linalg::dist(p, &c).powi(2), *sigma)).sum::<f64>() / n
        }
        Term::Variance { coef } => {
            let m = x.mean();
            coef * x.particles().map(|p| linalg::dist(p, &m).powi(2)).sum::<f64>() / n
        }
        Term::InteractionQuadratic { coef } => {
            let mut s = 0.0;
            for a in x.particles() {
                for b in x.particles() {
                    s += linalg::dist(a, b).powi(2);
                }
            }
            0.5 * coef * s / (n * n)
        }
        Term::InteractionGaussian { amplitude, sigma } => {
            let mut s = 0.0;
            for a in x.particles() {
                for b in x.particles() {
                    s += gaussian(linalg::dist(a, b).powi(2), *sigma);
                }
            }
            amplitude * s / (n * n)
        }
        Term::Custom(c) => c.eval(x),
    }
}

/// Mean-field gradient, flagged when it was reconstructed by finite differences.
#[derive(Debug, Clone)]
pub struct MfGradient {
    pub values: RescaledVector,
    pub finite_difference: bool,
}

/// Mean-field gradient `(∇_μφ(μ[x])(x_i))_i`.
pub fn mf_gradient(f: &Functional, mu: &ParticleEnsemble) -> Result<MfGradient> {
    f.validate(mu.d())?;
    let (n, d) = (mu.n(), mu.d());
    let mut g = RescaledVector::zeros(n, d);
    let mut fd = false;
    for t in &f.terms {
        match t {
            Term::Custom(c) => match c.mf_gradient(mu) {
                Some(v) => {
                    if (v.n(), v.d()) != (n, d) {
                        return Err(Error::DimensionMismatch { expected_n: n, expected_d: d, found_n: v.n(), found_d: v.d() });
                    }
                    g.axpy(1.0, &v)
                }
                None => {
                    fd = true;
                    g.axpy(1.0, &fd_gradient(&|x| c.eval(x), mu, FD_GRADIENT_STEP));
                }
            },
            _ => add_term_gradient(t, mu, g.as_mut_slice()),
        }
    }
    Ok(MfGradient { values: g, finite_difference: fd })
}

fn add_term_gradient(t: &Term, x: &ParticleEnsemble, out: &mut [f64]) {
    let n = x.n();
    let d = x.d();
    match t {
        Term::Constant { .. } | Term::Custom(_) => {}
        Term::LinearInMean { coef } => {
            for i in 0..n {
                for k in 0..d {
                    out[i * d + k] += coef[k];
                }
            }
        }
        Term::PotentialQuadratic { coef, center } => {
            let c = center_of(center, d);
            for (i, p) in x.particles().enumerate() {
                for k in 0..d {
                    out[i * d + k] += 2.0 * coef * (p[k] - c[k]);
                }
            }
        }
        Term::PotentialGaussian { amplitude, sigma, center } => {
            let c = center_of(center, d);
            let s2 = sigma * sigma;
            for (i, p) in x.particles().enumerate() {
                let v = amplitude * gaussian(linalg::dist(p, &c).powi(2), *sigma);
                for k in 0..d {
                    out[i * d + k] -= v * (p[k] - c[k]) / s2;
                }
            }
        }
        Term::Variance { coef } => {
            let m = x.mean();
            for (i, p) in x.particles().enumerate() {
                for k in 0..d {
                    out[i * d + k] += 2.0 * coef * (p[k] - m[k]);
                }
            }
        }
        Term::InteractionQuadratic { coef } => {
            // 2∫∇W(x − y)dμ(y) with ∇W(z) = coef·z
            let m = x.mean();
            for (i, p) in x.particles().enumerate() {
                for k in 0..d {
                    out[i * d + k] += 2.0 * coef * (p[k] - m[k]);
                }
            }
        }
        Term::InteractionGaussian { amplitude, sigma } => {
            let s2 = sigma * sigma;
            for i in 0..n {
                let a = x.particle(i);
                for b in x.particles() {
                    let w = amplitude * gaussian(linalg::dist(a, b).powi(2), *sigma);
                    for k in 0..d {
                        out[i * d + k] -= 2.0 * w * (a[k] - b[k]) / (s2 * n as f64);
                    }
                }
            }
        }
    }
}

/// Mean-field Hessian blocks.
///
/// The interaction blocks are stored as a block `uniform` shared by every pair
/// plus optional per-pair blocks; [`interaction_block`](Self::interaction_block)
/// returns their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct MfHessianOperator {
    n: usize,
    d: usize,
    diag: Vec<f64>,
    uniform: Vec<f64>,
    pairwise: Option<Vec<f64>>,
}

impl MfHessianOperator {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, diag: vec![0.0; n * d * d], uniform: vec![0.0; d * d], pairwise: None }
    }

    /// Builds an operator from explicit blocks: `diag[i]` and `inter[i][j]`, each row-major `d×d`.
    pub fn from_blocks(n: usize, d: usize, diag: Vec<f64>, inter: Vec<f64>) -> Result<Self> {
        if diag.len() != n * d * d || inter.len() != n * n * d * d {
            return Err(Error::invalid("hessian block arrays have the wrong length"));
        }
        Ok(Self { n, d, diag, uniform: vec![0.0; d * d], pairwise: Some(inter) })
    }

    /// Wraps a plain Hessian `∂²φ_N/∂x∂x` (size `Nd × Nd`) as interaction blocks `N²·P_ij`.
    pub fn from_plain_matrix(n: usize, d: usize, plain: &DMatrix<f64>) -> Self {
        let mut inter = vec![0.0; n * n * d * d];
        let scale = (n * n) as f64;
        for i in 0..n {
            for j in 0..n {
                for p in 0..d {
                    for q in 0..d {
                        // ⟨M h¹_i, h²_j⟩ = Σ_{p,q} M[p][q] h¹_{i,q} h²_{j,p}
                        inter[self_index(n, d, i, j) + p * d + q] = scale * plain[(j * d + p, i * d + q)];
                    }
                }
            }
        }
        Self { n, d, diag: vec![0.0; n * d * d], uniform: vec![0.0; d * d], pairwise: Some(inter) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `D_x∇_μφ(μ[x])(x_i)`.
    pub fn diag_block(&self, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.diag[i * dd..(i + 1) * dd]
    }

    /// `D²_μφ(μ[x])(x_i, x_j)`.
    pub fn interaction_block(&self, i: usize, j: usize) -> Vec<f64> {
        let mut b = self.uniform.clone();
        if let Some(pw) = &self.pairwise {
            let dd = self.d * self.d;
            let o = self_index(self.n, self.d, i, j);
            for (bk, pk) in b.iter_mut().zip(&pw[o..o + dd]) {
                *bk += pk;
            }
        }
        b
    }

    pub(crate) fn diag_mut(&mut self) -> &mut [f64] {
        &mut self.diag
    }

    pub(crate) fn uniform_mut(&mut self) -> &mut [f64] {
        &mut self.uniform
    }

    pub(crate) fn pairwise_mut(&mut self) -> &mut [f64] {
        let (n, d) = (self.n, self.d);
        self.pairwise.get_or_insert_with(|| vec![0.0; n * n * d * d])
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        assert_eq!((self.n, self.d), (other.n, other.d));
        for (a, b) in self.diag.iter_mut().zip(&other.diag) {
            *a += c * b;
        }
        for (a, b) in self.uniform.iter_mut().zip(&other.uniform) {
            *a += c * b;
        }
        if let Some(pw) = &other.pairwise {
            for (a, b) in self.pairwise_mut().iter_mut().zip(pw) {
                *a += c * b;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.diag.iter().all(|v| *v == 0.0)
            && self.uniform.iter().all(|v| *v == 0.0)
            && self.pairwise.as_ref().is_none_or(|p| p.iter().all(|v| *v == 0.0))
    }

    /// The bilinear form `B(h¹, h²)`.
    pub fn bilinear(&self, h1: &RescaledVector, h2: &RescaledVector) -> Result<f64> {
        for h in [h1, h2] {
            if (h.n(), h.d()) != (self.n, self.d) {
                return Err(Error::DimensionMismatch {
                    expected_n: self.n,
                    expected_d: self.d,
                    found_n: h.n(),
                    found_d: h.d(),
                });
            }
        }
        Ok(self.bilinear_raw(h1.as_slice(), h2.as_slice()))
    }

    pub(crate) fn bilinear_raw(&self, h1: &[f64], h2: &[f64]) -> f64 {
        let (n, d) = (self.n, self.d);
        let nf = n as f64;
        let dd = d * d;
        let mut diag = 0.0;
        for i in 0..n {
            diag += linalg::bilinear(&self.diag[i * dd..(i + 1) * dd], &h1[i * d..(i + 1) * d], &h2[i * d..(i + 1) * d]);
        }
        let mut inter = 0.0;
        if self.uniform.iter().any(|v| *v != 0.0) {
            let m1 = mean_raw(h1, n, d);
            let m2 = mean_raw(h2, n, d);
            inter += nf * nf * linalg::bilinear(&self.uniform, &m1, &m2);
        }
        if let Some(pw) = &self.pairwise {
            for i in 0..n {
                for j in 0..n {
                    let o = self_index(n, d, i, j);
                    inter += linalg::bilinear(&pw[o..o + dd], &h1[i * d..(i + 1) * d], &h2[j * d..(j + 1) * d]);
                }
            }
        }
        diag / nf + inter / (nf * nf)
    }

    /// Plain second-derivative matrix `P` with `B(h¹, h²) = h²ᵀ P h¹` (size `Nd × Nd`).
    pub fn plain_matrix(&self) -> DMatrix<f64> {
        let (n, d) = (self.n, self.d);
        let nf = n as f64;
        let mut p = DMatrix::zeros(n * d, n * d);
        for i in 0..n {
            let db = self.diag_block(i);
            for a in 0..d {
                for b in 0..d {
                    p[(i * d + a, i * d + b)] += db[a * d + b] / nf;
                }
            }
            for j in 0..n {
                let ib = self.interaction_block(i, j);
                // ⟨M h¹_i, h²_j⟩: row index belongs to h², column to h¹.
                for a in 0..d {
                    for b in 0..d {
                        p[(j * d + a, i * d + b)] += ib[a * d + b] / (nf * nf);
                    }
                }
            }
        }
        p
    }

    /// Riesz representation `N·P` in `((R^d)^N, ⟨·,·⟩_N)`; its eigenvalues are the
    /// extremal values of `B(h, h)/|h|_N²`.
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        self.plain_matrix() * self.n as f64
    }

    /// Extreme Rayleigh quotients `(min, max)` of `B(h,h)/|h|_N²`.
    pub fn rayleigh_range(&self) -> (f64, f64) {
        linalg::sym_eig_range(&self.operator_matrix())
    }
}

fn self_index(n: usize, d: usize, i: usize, j: usize) -> usize {
    (i * n + j) * d * d
}

fn mean_raw(h: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for c in h.chunks_exact(d) {
        for k in 0..d {
            m[k] += c[k];
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

#[derive(Debug, Clone)]
pub struct MfHessian {
    pub operator: MfHessianOperator,
    pub finite_difference: bool,
}

/// Mean-field Hessian operator of `f` at `μ[x]`.
pub fn mf_hessian(f: &Functional, mu: &ParticleEnsemble) -> Result<MfHessian> {
    f.validate(mu.d())?;
    let (n, d) = (mu.n(), mu.d());
    let mut h = MfHessianOperator::zeros(n, d);
    let mut fd = false;
    for t in &f.terms {
        match t {
            Term::Custom(c) => match c.mf_hessian(mu) {
                Some(op) => h.add_scaled(1.0, &op),
                None => {
                    fd = true;
                    let plain = fd_plain_hessian(&|x| c.eval(x), mu, FD_HESSIAN_STEP);
                    h.add_scaled(1.0, &MfHessianOperator::from_plain_matrix(n, d, &plain));
                }
            },
            _ => add_term_hessian(t, mu, &mut h),
        }
    }
    Ok(MfHessian { operator: h, finite_difference: fd })
}

fn add_term_hessian(t: &Term, x: &ParticleEnsemble, h: &mut MfHessianOperator) {
    let (n, d) = (x.n(), x.d());
    let dd = d * d;
    match t {
        Term::Constant { .. } | Term::LinearInMean { .. } | Term::Custom(_) => {}
        Term::PotentialQuadratic { coef, .. } => {
            let diag = h.diag_mut();
            for i in 0..n {
                for p in 0..d {
                    diag[i * dd + p * d + p] += 2.0 * coef;
                }
            }
        }
        Term::PotentialGaussian { amplitude, sigma, center } => {
            let c = center_of(center, d);
            let diag = h.diag_mut();
            for (i, p) in x.particles().enumerate() {
                let z: Vec<f64> = p.iter().zip(&c).map(|(a, b)| a - b).collect();
                for (k, v) in gaussian_hessian(*amplitude, *sigma, &z).into_iter().enumerate() {
                    diag[i * dd + k] += v;
                }
            }
        }
        Term::Variance { coef } | Term::InteractionQuadratic { coef } => {
            let diag = h.diag_mut();
            for i in 0..n {
                for p in 0..d {
                    diag[i * dd + p * d + p] += 2.0 * coef;
                }
            }
            let u = h.uniform_mut();
            for p in 0..d {
                u[p * d + p] -= 2.0 * coef;
            }
        }
        Term::InteractionGaussian { amplitude, sigma } => {
            let mut diag_add = vec![0.0; n * dd];
            let mut pair_add = vec![0.0; n * n * dd];
            for i in 0..n {
                for j in 0..n {
                    let z: Vec<f64> = x.particle(i).iter().zip(x.particle(j)).map(|(a, b)| a - b).collect();
                    let hw = gaussian_hessian(*amplitude, *sigma, &z);
                    let o = self_index(n, d, i, j);
                    for k in 0..dd {
                        diag_add[i * dd + k] += 2.0 * hw[k] / n as f64;
                        pair_add[o + k] -= 2.0 * hw[k];
                    }
                }
            }
            for (a, b) in h.diag_mut().iter_mut().zip(diag_add) {
                *a += b;
            }
            for (a, b) in h.pairwise_mut().iter_mut().zip(pair_add) {
                *a += b;
            }
        }
    }
}

/// Axis-aligned compact box in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn cube(d: usize, half_width: f64) -> Self {
        Self { lower: vec![-half_width; d], upper: vec![half_width; d] }
    }

    pub fn d(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::invalid("box bounds must be non-empty and of equal length"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::Unsupported("box must be finite with lower <= upper".into()));
        }
        Ok(())
    }

    /// Deterministic tensor grid with `per_axis` points per coordinate.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let d = self.d();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|k| {
                        let s = idx % per_axis;
                        idx /= per_axis;
                        self.lower[k] + (self.upper[k] - self.lower[k]) * s as f64 / (per_axis - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

fn grid_resolution(d: usize) -> usize {
    match d {
        1 => 33,
        2 => 17,
        3 => 9,
        _ => 5,
    }
}

/// Sup-norm bounds `(sup‖D_x∇_μφ‖, sup‖D²_μφ‖)` over measures supported in `domain`,
/// in spectral norm.
pub fn hessian_norm_bounds(f: &Functional, domain: &BoxDomain) -> Result<(f64, f64)> {
    domain.validate()?;
    let d = domain.d();
    f.validate(d)?;
    let grid = domain.grid(grid_resolution(d));
    let (mut s1, mut s2) = (0.0, 0.0);
    for t in &f.terms {
        let (a, b) = match t {
            Term::Constant { .. } | Term::LinearInMean { .. } => (0.0, 0.0),
            Term::PotentialQuadratic { coef, .. } => (2.0 * coef.abs(), 0.0),
            Term::PotentialGaussian { amplitude, sigma, center } => {
                let c = center_of(center, d);
                let sup = grid
                    .iter()
                    .map(|p| {
                        let z: Vec<f64> = p.iter().zip(&c).map(|(a, b)| a - b).collect();
                        linalg::spectral_norm(&gaussian_hessian(*amplitude, *sigma, &z), d)
                    })
                    .fold(0.0, f64::max);
                (sup, 0.0)
            }
            Term::Variance { coef } | Term::InteractionQuadratic { coef } => (2.0 * coef.abs(), 2.0 * coef.abs()),
            Term::InteractionGaussian { amplitude, sigma } => {
                // D_x∇ is an average of 2∇²W over differences, D²_μ is −2∇²W of a difference.
                let mut sup: f64 = 0.0;
                for p in &grid {
                    for q in &grid {
                        let z: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
                        sup = sup.max(linalg::spectral_norm(&gaussian_hessian(*amplitude, *sigma, &z), d));
                    }
                }
                (2.0 * sup, 2.0 * sup)
            }
            Term::Custom(c) => {
                return Err(Error::Unsupported(format!(
                    "no closed-form second-derivative bound for custom functional `{}`",
                    c.name()
                )))
            }
        };
        s1 += a;
        s2 += b;
    }
    Ok((s1, s2))
}

/// λ-convexity constant `−(sup‖D_x∇_μφ‖ + sup‖D²_μφ‖)` over the box: `B(h,h) ≥ λ̂·|h|_N²`
/// for every ensemble supported in the box.
pub fn hessian_lower_bound(f: &Functional, domain: &BoxDomain) -> Result<f64> {
    let (s1, s2) = hessian_norm_bounds(f, domain)?;
    Ok(-(s1 + s2))
}

/// Central-difference mean-field gradient `N·∂φ_N/∂x_i`.
pub fn fd_gradient(eval: &dyn Fn(&ParticleEnsemble) -> f64, x: &ParticleEnsemble, step: f64) -> RescaledVector {
    let (n, d) = (x.n(), x.d());
    let mut g = vec![0.0; n * d];
    let mut e = vec![0.0; n * d];
    for k in 0..n * d {
        e[k] = 1.0;
        let fp = eval(&x.displaced_unchecked(&e, step));
        let fm = eval(&x.displaced_unchecked(&e, -step));
        e[k] = 0.0;
        g[k] = n as f64 * (fp - fm) / (2.0 * step);
    }
    RescaledVector::from_raw(n, d, g)
}

/// Central-difference plain Hessian `∂²φ_N/∂x_a∂x_b`.
pub fn fd_plain_hessian(eval: &dyn Fn(&ParticleEnsemble) -> f64, x: &ParticleEnsemble, step: f64) -> DMatrix<f64> {
    let m = x.n() * x.d();
    let mut h = DMatrix::zeros(m, m);
    let mut e = vec![0.0; m];
    for a in 0..m {
        for b in a..m {
            let mut val = 0.0;
            for (sa, sb, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                e[a] += sa;
                e[b] += sb;
                val += w * eval(&x.displaced_unchecked(&e, step));
                e[a] = 0.0;
                e[b] = 0.0;
            }
            let v = val / (4.0 * step * step);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub gradient_error: f64,
    pub hessian_error: f64,
    pub max_error: f64,
    pub passed: bool,
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the closed-form gradient and Hessian with central finite differences of `φ_N`.
pub fn fd_check(f: &Functional, mu: &ParticleEnsemble, tol: f64) -> Result<FdReport> {
    let eval = |x: &ParticleEnsemble| f.eval(x);
    let g = mf_gradient(f, mu)?.values;
    let g_fd = fd_gradient(&eval, mu, FD_GRADIENT_STEP);
    let gradient_error = relative_error(g.as_slice(), g_fd.as_slice());

    let n2 = (mu.n() * mu.n()) as f64;
    let h = mf_hessian(f, mu)?.operator.plain_matrix() * n2;
    // Richardson step cancels the O(step²) term, which otherwise dominates where the Hessian is small
    let coarse = fd_plain_hessian(&eval, mu, FD_HESSIAN_STEP);
    let fine = fd_plain_hessian(&eval, mu, 0.5 * FD_HESSIAN_STEP);
    let h_fd = (fine * 4.0 - coarse) * (n2 / 3.0);
    let hessian_error = relative_error(h.as_slice(), h_fd.as_slice());

    let max_error = gradient_error.max(hessian_error);
    Ok(FdReport { gradient_error, hessian_error, max_error, passed: max_error <= tol })
}

/// Second-order Taylor remainder `|φ_N(x+sh) − φ_N(x) − s⟨∇^Nφ_N, h⟩_N − ½s²B(h,h)|`.
pub fn taylor_remainder(f: &Functional, x: &ParticleEnsemble, h: &RescaledVector, s: f64) -> Result<f64> {
    let g = mf_gradient(f, x)?.values;
    let b = mf_hessian(f, x)?.operator.bilinear(h, h)?;
    let moved = x.displaced(&h.scaled(s))?;
    let lin = crate::measures::inner_n(&g, h)?;
    Ok((f.eval(&moved) - f.eval(x) - s * lin - 0.5 * s * s * b).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::norm_n;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(rng: &mut ChaCha8Rng, n: usize, d: usize, half: f64) -> ParticleEnsemble {
        ParticleEnsemble::new(n, d, (0..n * d).map(|_| rng.gen_range(-half..half)).collect()).unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RescaledVector {
        RescaledVector::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn library(d: usize) -> Vec<Functional> {
        vec![
            Term::Constant { value: 2.5 }.into(),
            Term::LinearInMean { coef: (0..d).map(|k| 1.0 + k as f64).collect() }.into(),
            Term::PotentialQuadratic { coef: 0.7, center: Some(vec![0.1; d]) }.into(),
            Term::PotentialGaussian { amplitude: 1.3, sigma: 0.8, center: None }.into(),
            Term::Variance { coef: -0.5 }.into(),
            Term::InteractionQuadratic { coef: 1.0 }.into(),
            Term::InteractionGaussian { amplitude: -0.9, sigma: 0.6 }.into(),
        ]
    }

    #[test]
    fn gradient_examples() {
        let x = ParticleEnsemble::from_1d(&[-1.0, 1.0]).unwrap();
        let g = mf_gradient(&Term::Constant { value: 3.0 }.into(), &x).unwrap();
        assert_eq!(g.values.max_abs(), 0.0);

        let var: Functional = Term::Variance { coef: 1.0 }.into();
        let g = mf_gradient(&var, &x).unwrap().values;
        let fd = fd_gradient(&|e| var.eval(e), &x, 1e-5);
        for (a, b) in g.as_slice().iter().zip(fd.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(g.as_slice(), &[-2.0, 2.0]);

        let sq: Functional = Term::PotentialQuadratic { coef: 1.0, center: None }.into();
        let y = ParticleEnsemble::new(3, 2, vec![0.3, -1.2, 0.5, 0.0, 2.0, -0.7]).unwrap();
        let g = mf_gradient(&sq, &y).unwrap().values;
        let fd = fd_gradient(&|e| sq.eval(e), &y, 1e-5);
        for ((a, b), xi) in g.as_slice().iter().zip(fd.as_slice()).zip(y.as_slice()) {
            assert!((a - 2.0 * xi).abs() < 1e-14);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn hessian_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_ensemble(&mut rng, 6, 2, 1.0);
        let lin: Functional = Term::LinearInMean { coef: vec![1.0, -2.0] }.into();
        assert!(mf_hessian(&lin, &x).unwrap().operator.is_zero());

        // coef 1/2: B(y,y) = |y|_N² − |ȳ|²
        let half_var: Functional = Term::Variance { coef: 0.5 }.into();
        let h = random_vector(&mut rng, 6, 2);
        let b = mf_hessian(&half_var, &x).unwrap().operator.bilinear(&h, &h).unwrap();
        let ybar = h.mean();
        assert!((b - (norm_n(&h).powi(2) - linalg::dot(&ybar, &ybar))).abs() < 1e-13);

        let sq: Functional = Term::PotentialQuadratic { coef: 1.0, center: None }.into();
        let b = mf_hessian(&sq, &x).unwrap().operator.bilinear(&h, &h).unwrap();
        assert!((b - 2.0 * norm_n(&h).powi(2)).abs() < 1e-13);
        // second-order central difference along h
        let s = 1e-3;
        let fd = (sq.eval(&x.displaced(&h.scaled(s)).unwrap()) - 2.0 * sq.eval(&x)
            + sq.eval(&x.displaced(&h.scaled(-s)).unwrap()))
            / (s * s);
        assert!((fd - b).abs() < 1e-6);
    }

    #[test]
    fn lower_bound_examples() {
        let cube = BoxDomain::cube(2, 1.0);
        assert_eq!(hessian_lower_bound(&Term::Constant { value: 1.0 }.into(), &cube).unwrap(), 0.0);
        assert_eq!(hessian_lower_bound(&Term::Variance { coef: 1.0 }.into(), &cube).unwrap(), -4.0);
        let sq: Functional = Term::PotentialQuadratic { coef: 1.0, center: None }.into();
        assert_eq!(hessian_lower_bound(&sq, &cube).unwrap(), -2.0);
        assert!(hessian_lower_bound(&sq, &BoxDomain { lower: vec![0.0], upper: vec![f64::INFINITY] }).is_err());
    }

    #[test]
    fn lower_bound_holds_on_random_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=2 {
            let cube = BoxDomain::cube(d, 1.0);
            for f in library(d) {
                let lb = hessian_lower_bound(&f, &cube).unwrap();
                let (s1, s2) = hessian_norm_bounds(&f, &cube).unwrap();
                for _ in 0..5 {
                    let x = random_ensemble(&mut rng, 7, d, 1.0);
                    let (lo, hi) = mf_hessian(&f, &x).unwrap().operator.rayleigh_range();
                    assert!(lo >= lb - 1e-9, "{f:?}: {lo} < {lb}");
                    assert!(hi.abs().max(lo.abs()) <= s1 + s2 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn fd_check_passes_on_library() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_ensemble(&mut rng, 16, 1, 1.0);
        let r = fd_check(&Term::Constant { value: 1.0 }.into(), &x, 1e-8).unwrap();
        assert!(r.passed && r.max_error == 0.0);
        for d in 1..=3 {
            let x = random_ensemble(&mut rng, 5, d, 1.0);
            for f in library(d) {
                let r = fd_check(&f, &x, 1e-5).unwrap();
                assert!(r.passed, "{f:?} d={d}: {r:?}");
            }
        }
    }

    #[test]
    fn hessian_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_ensemble(&mut rng, 5, 2, 1.0);
        let f = Functional { terms: library(2).into_iter().flat_map(|f| f.terms).collect() };
        let op = mf_hessian(&f, &x).unwrap().operator;
        for _ in 0..10 {
            let a = random_vector(&mut rng, 5, 2);
            let b = random_vector(&mut rng, 5, 2);
            let ab = op.bilinear(&a, &b).unwrap();
            let ba = op.bilinear(&b, &a).unwrap();
            assert!((ab - ba).abs() <= 1e-10 * ab.abs().max(1.0));
        }
    }

    #[test]
    fn relabeling_permutes_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_ensemble(&mut rng, 4, 2, 1.0);
        let perm = [2usize, 0, 3, 1];
        let px = ParticleEnsemble::from_points(&perm.iter().map(|&i| x.particle(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let f = Functional { terms: library(2).into_iter().flat_map(|f| f.terms).collect() };
        let g = mf_gradient(&f, &x).unwrap().values;
        let pg = mf_gradient(&f, &px).unwrap().values;
        let h = mf_hessian(&f, &x).unwrap().operator;
        let ph = mf_hessian(&f, &px).unwrap().operator;
        for (a, &i) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!((pg.entry(a)[k] - g.entry(i)[k]).abs() < 1e-13);
            }
            for (b, &j) in perm.iter().enumerate() {
                let (u, v) = (ph.interaction_block(a, b), h.interaction_block(i, j));
                assert!(u.iter().zip(&v).all(|(p, q)| (p - q).abs() < 1e-13));
            }
        }
    }

    #[test]
    fn taylor_remainder_is_third_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in 1..=3 {
            let x = random_ensemble(&mut rng, 6, d, 1.0);
            let h = random_vector(&mut rng, 6, d);
            for f in library(d) {
                let r1 = taylor_remainder(&f, &x, &h, 0.1).unwrap();
                let r2 = taylor_remainder(&f, &x, &h, 0.05).unwrap();
                if r1 < 1e-12 {
                    continue; // quadratic functional: expansion is exact
                }
                assert!(r1 / r2 >= 3.5, "{f:?}: ratio {}", r1 / r2);
            }
        }
    }

    struct Quartic;
    impl CustomFunctional for Quartic {
        fn name(&self) -> &str {
            "quartic"
        }
        fn eval(&self, x: &ParticleEnsemble) -> f64 {
            x.as_slice().iter().map(|v| v.powi(4)).sum::<f64>() / x.n() as f64
        }
    }

    #[test]
    fn custom_functional_falls_back_to_finite_differences() {
        let f: Functional = Term::Custom(Arc::new(Quartic)).into();
        let x = ParticleEnsemble::from_1d(&[0.5, -1.0]).unwrap();
        let g = mf_gradient(&f, &x).unwrap();
        assert!(g.finite_difference);
        assert!((g.values.as_slice()[0] - 4.0 * 0.125).abs() < 1e-6);
        let h = mf_hessian(&f, &x).unwrap();
        assert!(h.finite_difference);
        let e = RescaledVector::from_1d(&[1.0, 0.0]).unwrap();
        // plain second derivative (1/N)·12x² at x = 0.5
        assert!((h.operator.bilinear(&e, &e).unwrap() - 0.5 * 12.0 * 0.25).abs() < 1e-5);
        assert!(hessian_lower_bound(&f, &BoxDomain::cube(1, 1.0)).is_err());
    }

    #[test]
    fn config_tags_round_trip() {
        let f = Functional { terms: library(2).into_iter().flat_map(|f| f.terms).collect() };
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"kind\":\"interaction-gaussian\""));
        let back: Functional = serde_json::from_str(&s).unwrap();
        assert_eq!(back.terms.len(), f.terms.len());
        assert!(serde_json::from_str::<Functional>(r#"[{"kind":"variance","coef":1.0,"bogus":2}]"#).is_err());
    }
}
