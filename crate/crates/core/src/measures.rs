//! Uniform empirical measures `μ[x] = (1/N) Σ δ_{x_i}`, the rescaled inner
//! product on `(R^d)^N`, and exact Wasserstein distances between equal-size
//! empirical measures.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// Positions of `N` particles in `R^d`, stored particle-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleEnsemble {
    n: usize,
    d: usize,
    positions: Vec<f64>,
}

/// An element of `((R^d)^N, ⟨·,·⟩_N)`: perturbations, gradients, costates, controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescaledVector {
    n: usize,
    d: usize,
    entries: Vec<f64>,
}

fn check_layout(n: usize, d: usize, data: &[f64]) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("particle count and dimension must be at least 1"));
    }
    if data.len() != n * d {
        return Err(Error::invalid(format!(
            "expected {} coordinates for N={n}, d={d}, got {}",
            n * d,
            data.len()
        )));
    }
    Ok(())
}

impl ParticleEnsemble {
    pub fn new(n: usize, d: usize, positions: Vec<f64>) -> Result<Self> {
        check_layout(n, d, &positions)?;
        if let Some(k) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "position of particle {} is not finite",
                k / d
            )));
        }
        Ok(Self { n, d, positions })
    }

    /// One-dimensional ensemble from a list of positions.
    pub fn from_1d(xs: &[f64]) -> Result<Self> {
        Self::new(xs.len(), 1, xs.to_vec())
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("points have inconsistent dimensions"));
        }
        Self::new(points.len(), d, points.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.positions
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks_exact(self.d)
    }

    /// Barycenter `∫ x dμ[x]`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.particles() {
            for (mk, pk) in m.iter_mut().zip(p) {
                *mk += pk;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }

    /// `x + h`, keeping the finiteness invariant.
    pub fn displaced(&self, h: &RescaledVector) -> Result<Self> {
        self.check_same(h.n, h.d)?;
        let pos = self
            .positions
            .iter()
            .zip(&h.entries)
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.n, self.d, pos)
    }

    /// Same as [`displaced`](Self::displaced) without the finiteness check.
    pub(crate) fn displaced_unchecked(&self, h: &[f64], scale: f64) -> Self {
        let positions = self
            .positions
            .iter()
            .zip(h)
            .map(|(a, b)| a + scale * b)
            .collect();
        Self { n: self.n, d: self.d, positions }
    }

    pub(crate) fn from_raw(n: usize, d: usize, positions: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len(), n * d);
        Self { n, d, positions }
    }

    pub fn to_vector(&self) -> RescaledVector {
        RescaledVector { n: self.n, d: self.d, entries: self.positions.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, n: usize, d: usize) -> Result<()> {
        if self.n != n || self.d != d {
            return Err(Error::DimensionMismatch {
                expected_n: self.n,
                expected_d: self.d,
                found_n: n,
                found_d: d,
            });
        }
        Ok(())
    }

    /// Particles reordered lexicographically; equal measures have equal canonical forms.
    pub fn canonical(&self) -> Self {
        let mut pts: Vec<&[f64]> = self.particles().collect();
        pts.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Self::from_raw(self.n, self.d, pts.concat())
    }

    /// Plain-text table: header `N d`, then one row of `d` coordinates per particle.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.d);
        for p in self.particles() {
            let row: Vec<String> = p.iter().map(|v| format_f64(*v)).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hl, header) = lines
            .next()
            .ok_or(Error::Parse { line: 1, message: "missing `N d` header".into() })?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: hl + 1, message: e.to_string() })?;
        let [n, d] = head[..] else {
            return Err(Error::Parse { line: hl + 1, message: "header must be `N d`".into() });
        };
        let mut data = Vec::with_capacity(n * d);
        let mut rows = 0;
        for (ln, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: ln + 1, message: e.to_string() })?;
            if row.len() != d {
                return Err(Error::Parse {
                    line: ln + 1,
                    message: format!("expected {d} coordinates, found {}", row.len()),
                });
            }
            data.extend(row);
            rows += 1;
        }
        if rows != n {
            return Err(Error::Parse {
                line: hl + 1,
                message: format!("header announces {n} rows, found {rows}"),
            });
        }
        Self::new(n, d, data)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl RescaledVector {
    pub fn new(n: usize, d: usize, entries: Vec<f64>) -> Result<Self> {
        check_layout(n, d, &entries)?;
        Ok(Self { n, d, entries })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, entries: vec![0.0; n * d] }
    }

    pub fn from_1d(xs: &[f64]) -> Result<Self> {
        Self::new(xs.len(), 1, xs.to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks_exact(self.d)
    }

    pub(crate) fn from_raw(n: usize, d: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), n * d);
        Self { n, d, entries }
    }

    /// `(1/N) Σ_i y_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for e in self.entries() {
            for (mk, ek) in m.iter_mut().zip(e) {
                *mk += ek;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, d: self.d, entries: self.entries.iter().map(|v| c * v).collect() }
    }

    /// `self += c · other` (layouts must agree; checked in debug builds).
    pub fn axpy(&mut self, c: f64, other: &Self) {
        debug_assert_eq!((self.n, self.d), (other.n, other.d));
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected_n: self.n,
                expected_d: self.d,
                found_n: other.n,
                found_d: other.d,
            });
        }
        Ok(())
    }
}

impl Add for &RescaledVector {
    type Output = RescaledVector;
    fn add(self, rhs: Self) -> RescaledVector {
        assert_eq!((self.n, self.d), (rhs.n, rhs.d), "layout mismatch in addition");
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &RescaledVector {
    type Output = RescaledVector;
    fn sub(self, rhs: Self) -> RescaledVector {
        assert_eq!((self.n, self.d), (rhs.n, rhs.d), "layout mismatch in subtraction");
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<&RescaledVector> for f64 {
    type Output = RescaledVector;
    fn mul(self, rhs: &RescaledVector) -> RescaledVector {
        rhs.scaled(self)
    }
}

/// Rescaled inner product `⟨a, b⟩_N = (1/N) Σ_i ⟨a_i, b_i⟩`.
pub fn inner_n(a: &RescaledVector, b: &RescaledVector) -> Result<f64> {
    a.same_layout(b)?;
    Ok(linalg::dot(&a.entries, &b.entries) / a.n as f64)
}

pub fn norm_n(a: &RescaledVector) -> f64 {
    (linalg::dot(&a.entries, &a.entries) / a.n as f64).sqrt()
}

/// `max_i |x_i|`.
pub fn support_radius(mu: &ParticleEnsemble) -> f64 {
    mu.particles().map(linalg::norm).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Order {
    One,
    Two,
}

impl Order {
    pub fn exponent(self) -> f64 {
        match self {
            Order::One => 1.0,
            Order::Two => 2.0,
        }
    }

    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Order::One),
            2 => Ok(Order::Two),
            _ => Err(Error::Unsupported(format!("Wasserstein order {p}; only 1 and 2 are supported"))),
        }
    }
}

fn ground_cost(a: &[f64], b: &[f64], p: Order) -> f64 {
    match p {
        Order::One => linalg::dist(a, b),
        Order::Two => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Exact `W_p(μ[x], μ[y])` between equal-size uniform empirical measures.
///
/// In one dimension the monotone (sorted) matching is optimal; otherwise the
/// optimal assignment is solved exactly.
pub fn wasserstein(p: Order, mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<f64> {
    if mu.d != nu.d {
        return Err(Error::DimensionMismatch {
            expected_n: mu.n,
            expected_d: mu.d,
            found_n: nu.n,
            found_d: nu.d,
        });
    }
    if mu.n != nu.n {
        return Err(Error::Unsupported(format!(
            "transport between empirical measures of unequal sizes ({} vs {})",
            mu.n, nu.n
        )));
    }
    let n = mu.n;
    let total = if mu.d == 1 {
        let mut a = mu.positions.clone();
        let mut b = nu.positions.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs().powf(p.exponent()))
            .sum::<f64>()
    } else {
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| ground_cost(mu.particle(i), nu.particle(j), p))
            .collect();
        let assignment = hungarian(n, &cost);
        assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
    };
    Ok((total / n as f64).powf(1.0 / p.exponent()))
}

/// Largest assignment size accepted by [`wasserstein_replicated`] for d > 1.
pub const REPLICATION_CAP: usize = 1024;

/// `W_p` between uniform empirical measures of possibly different sizes.
///
/// Each measure is replicated to the least common multiple of the two sizes,
/// which leaves the measures unchanged and reduces the problem to an
/// equal-size assignment. In one dimension the quantile formula is used directly.
pub fn wasserstein_replicated(p: Order, mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<f64> {
    if mu.n == nu.n {
        return wasserstein(p, mu, nu);
    }
    if mu.d != nu.d {
        return Err(Error::DimensionMismatch {
            expected_n: mu.n,
            expected_d: mu.d,
            found_n: nu.n,
            found_d: nu.d,
        });
    }
    let l = lcm(mu.n, nu.n);
    if mu.d == 1 {
        let mut a = mu.positions.clone();
        let mut b = nu.positions.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (ra, rb) = (l / mu.n, l / nu.n);
        let total: f64 = (0..l)
            .map(|k| (a[k / ra] - b[k / rb]).abs().powf(p.exponent()))
            .sum();
        return Ok((total / l as f64).powf(1.0 / p.exponent()));
    }
    if l > REPLICATION_CAP {
        return Err(Error::Unsupported(format!(
            "replicated assignment of size {l} exceeds {REPLICATION_CAP}"
        )));
    }
    wasserstein(p, &replicate(mu, l / mu.n), &replicate(nu, l / nu.n))
}

fn replicate(mu: &ParticleEnsemble, times: usize) -> ParticleEnsemble {
    let mut pos = Vec::with_capacity(mu.positions.len() * times);
    for p in mu.particles() {
        for _ in 0..times {
            pos.extend_from_slice(p);
        }
    }
    ParticleEnsemble::from_raw(mu.n * times, mu.d, pos)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix (row-major).
///
/// Shortest augmenting paths with potentials, `O(n³)`. Returns `assignment[row] = col`.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(p: Order, mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, f: &dyn Fn(&[usize]) -> f64) {
            if k == perm.len() {
                *best = best.min(f(perm));
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, best, f);
                perm.swap(k, i);
            }
        }
        let n = mu.n();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        let f = |perm: &[usize]| -> f64 {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| ground_cost(mu.particle(i), nu.particle(j), p))
                .sum::<f64>()
        };
        permute(0, &mut perm, &mut best, &f);
        (best / n as f64).powf(1.0 / p.exponent())
    }

    #[test]
    fn inner_product_examples() {
        let a = RescaledVector::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(inner_n(&a, &a).unwrap(), 25.0);
        let a = RescaledVector::from_1d(&[1.0, 1.0]).unwrap();
        let b = RescaledVector::from_1d(&[1.0, -1.0]).unwrap();
        assert_eq!(inner_n(&a, &b).unwrap(), 0.0);
        // (1/2)(1 + 1)
        let a = RescaledVector::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(inner_n(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let a = RescaledVector::zeros(2, 1);
        let b = RescaledVector::zeros(3, 1);
        assert!(matches!(inner_n(&a, &b), Err(Error::DimensionMismatch { .. })));
        let c = RescaledVector::zeros(2, 2);
        assert!(inner_n(&a, &c).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let mu = ParticleEnsemble::from_1d(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(wasserstein(Order::Two, &mu, &mu).unwrap(), 0.0);
        let a = ParticleEnsemble::from_1d(&[0.0]).unwrap();
        let b = ParticleEnsemble::from_1d(&[1.0]).unwrap();
        assert_eq!(wasserstein(Order::One, &a, &b).unwrap(), 1.0);
        let a = ParticleEnsemble::from_1d(&[0.0, 1.0]).unwrap();
        let b = ParticleEnsemble::from_1d(&[0.5, 1.5]).unwrap();
        assert!((wasserstein(Order::One, &a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!((brute_force(Order::One, &a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_are_unsupported() {
        let a = ParticleEnsemble::from_1d(&[0.0, 1.0]).unwrap();
        let b = ParticleEnsemble::from_1d(&[0.5]).unwrap();
        assert!(matches!(wasserstein(Order::One, &a, &b), Err(Error::Unsupported(_))));
        // replication: {0,1} vs {0.5} is 0.5 in W_1
        assert!((wasserstein_replicated(Order::One, &a, &b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn replicated_matches_assignment_in_2d() {
        let a = ParticleEnsemble::from_points(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = ParticleEnsemble::from_points(&[vec![0.5, 0.0], vec![0.5, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let w = wasserstein_replicated(Order::Two, &a, &b).unwrap();
        let w2 = wasserstein(Order::Two, &replicate(&a, 2), &b).unwrap();
        assert!((w - w2).abs() < 1e-15);
    }

    #[test]
    fn support_radius_examples() {
        assert_eq!(support_radius(&ParticleEnsemble::from_1d(&[0.0]).unwrap()), 0.0);
        assert_eq!(support_radius(&ParticleEnsemble::from_1d(&[-1.0, 0.5]).unwrap()), 1.0);
        let e = ParticleEnsemble::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(support_radius(&e), 5.0);
    }

    #[test]
    fn rejects_bad_ensembles() {
        assert!(ParticleEnsemble::new(0, 1, vec![]).is_err());
        assert!(ParticleEnsemble::new(1, 0, vec![]).is_err());
        assert!(ParticleEnsemble::new(2, 1, vec![1.0]).is_err());
        assert!(ParticleEnsemble::from_1d(&[f64::NAN]).is_err());
    }

    #[test]
    fn table_round_trip_is_exact() {
        let e = ParticleEnsemble::new(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI]).unwrap();
        let back = ParticleEnsemble::from_table(&e.to_table()).unwrap();
        assert_eq!(e, back);
        assert!(ParticleEnsemble::from_table("2 1\n0.5\n").is_err());
        assert!(ParticleEnsemble::from_table("1 2\n0.5\n").is_err());
    }

    #[test]
    fn canonical_form_ignores_labels() {
        let a = ParticleEnsemble::from_points(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let b = ParticleEnsemble::from_points(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(a.canonical(), b.canonical());
    }

    fn ensemble(n: usize, d: usize) -> impl Strategy<Value = ParticleEnsemble> {
        prop::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| ParticleEnsemble::new(n, d, v).unwrap())
    }

    proptest! {
        #[test]
        fn inner_product_is_symmetric_bilinear_positive(
            a in prop::collection::vec(-5.0f64..5.0, 12),
            b in prop::collection::vec(-5.0f64..5.0, 12),
            c in -3.0f64..3.0,
        ) {
            let a = RescaledVector::new(4, 3, a).unwrap();
            let b = RescaledVector::new(4, 3, b).unwrap();
            let ab = inner_n(&a, &b).unwrap();
            prop_assert!((ab - inner_n(&b, &a).unwrap()).abs() < 1e-12);
            let lhs = inner_n(&(&a + &b.scaled(c)), &a).unwrap();
            let rhs = inner_n(&a, &a).unwrap() + c * ab;
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert!(inner_n(&a, &a).unwrap() >= 0.0);
            prop_assert!(ab.abs() <= norm_n(&a) * norm_n(&b) + 1e-12);
        }

        #[test]
        fn sorted_matching_equals_brute_force(n in 1usize..=7, seed in prop::collection::vec(-2.0f64..2.0, 14)) {
            let mu = ParticleEnsemble::from_1d(&seed[..n]).unwrap();
            let nu = ParticleEnsemble::from_1d(&seed[7..7 + n]).unwrap();
            for p in [Order::One, Order::Two] {
                let w = wasserstein(p, &mu, &nu).unwrap();
                prop_assert!((w - brute_force(p, &mu, &nu)).abs() < 1e-12);
            }
        }

        #[test]
        fn hungarian_equals_brute_force_2d((mu, nu) in (1usize..=6).prop_flat_map(|n| (ensemble(n, 2), ensemble(n, 2)))) {
            for p in [Order::One, Order::Two] {
                let w = wasserstein(p, &mu, &nu).unwrap();
                prop_assert!((w - brute_force(p, &mu, &nu)).abs() < 1e-12);
            }
        }

        #[test]
        fn rescaled_norm_dominates_w2((x, y) in (ensemble(5, 2), ensemble(5, 2))) {
            let diff = &x.to_vector() - &y.to_vector();
            prop_assert!(wasserstein(Order::Two, &x, &y).unwrap() <= norm_n(&diff) + 1e-12);
        }
    }
}
