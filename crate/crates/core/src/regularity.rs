//! Spatial regularity of computed controls: pairwise Lipschitz quotients, a global
//! Lipschitz feedback field, and convergence of solutions as `N` grows.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{format_f64, support_radius, wasserstein_replicated, Order, ParticleEnsemble};
use crate::pmp::{solve_fbsm, FbsmOptions, PontryaginTriple, TimeGrid};
use crate::problem::{ControlSet, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    /// `max_{k, i≠j} |u_i(t_k) − u_j(t_k)| / |x_i(t_k) − x_j(t_k)|`.
    pub lip_hat: f64,
    /// Largest quotient at each node.
    pub profile: Vec<f64>,
    /// `(node, i, j)` where `lip_hat` is attained.
    pub argmax: Option<[usize; 3]>,
    /// Pairs closer than `eps_sep`, summed over nodes.
    pub excluded_pairs: usize,
    pub eps_sep: f64,
    /// Set when every pair was excluded.
    pub inconclusive: bool,
    /// `max_k max(support radius of x(t_k), max_i |r_i(t_k)|)`.
    pub r_t: f64,
    /// `max_k max_i |x_i(t_{k+1}) − x_i(t_k)| / h`.
    pub l_t: f64,
}

impl RegularityReport {
    /// Two-column CSV `t,lip`.
    pub fn profile_csv(&self, grid: &TimeGrid) -> String {
        let mut s = String::from("t,lip\n");
        for (k, q) in self.profile.iter().enumerate() {
            let _ = writeln!(s, "{},{}", format_f64(grid.node(k)), format_f64(*q));
        }
        s
    }
}

/// Default separation threshold `1e-9·max(1, scale)`, where `scale` is the largest support radius.
pub fn default_eps_sep(triple: &PontryaginTriple) -> f64 {
    let scale = triple.states.iter().map(support_radius).fold(0.0, f64::max);
    1e-9 * scale.max(1.0)
}

/// Pairwise control-to-state difference quotients at every node.
pub fn lipschitz_scan(triple: &PontryaginTriple, eps_sep: Option<f64>) -> RegularityReport {
    let eps = eps_sep.unwrap_or_else(|| default_eps_sep(triple));
    let n = triple.n();
    let m = triple.grid.steps();
    let per_node: Vec<(f64, Option<[usize; 2]>, usize)> = (0..=m)
        .into_par_iter()
        .map(|k| {
            let x = &triple.states[k];
            let u = triple.controls.at_node(k);
            let (mut best, mut arg, mut excl) = (0.0f64, None, 0usize);
            for i in 0..n {
                for j in i + 1..n {
                    let dx = linalg::dist(x.particle(i), x.particle(j));
                    if dx < eps {
                        excl += 1;
                        continue;
                    }
                    let q = linalg::dist(u.entry(i), u.entry(j)) / dx;
                    if q > best || arg.is_none() {
                        best = best.max(q);
                        arg = Some([i, j]);
                    }
                }
            }
            (best, arg, excl)
        })
        .collect();
    let mut lip_hat = 0.0;
    let mut argmax = None;
    let mut excluded_pairs = 0;
    let mut any = false;
    for (k, (q, arg, excl)) in per_node.iter().enumerate() {
        excluded_pairs += excl;
        if let Some([i, j]) = arg {
            if !any || *q > lip_hat {
                lip_hat = *q;
                argmax = Some([k, *i, *j]);
            }
            any = true;
        }
    }
    let r_t = triple
        .states
        .iter()
        .zip(&triple.costates)
        .map(|(x, r)| support_radius(x).max(r.entries().map(linalg::norm).fold(0.0, f64::max)))
        .fold(0.0, f64::max);
    let h = triple.grid.step();
    let l_t = triple
        .states
        .windows(2)
        .map(|w| (0..n).map(|i| linalg::dist(w[0].particle(i), w[1].particle(i)) / h).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    RegularityReport {
        lip_hat,
        profile: per_node.iter().map(|p| p.0).collect(),
        argmax,
        excluded_pairs,
        eps_sep: eps,
        inconclusive: !any && n > 1,
        r_t,
        l_t,
    }
}

/// Componentwise lower McShane extension of particle controls, followed by projection onto `U`.
#[derive(Debug, Clone)]
pub struct McShaneField {
    positions: ParticleEnsemble,
    controls: Vec<f64>,
    lipschitz: f64,
    set: ControlSet,
}

impl McShaneField {
    /// Field at time `t`: states interpolated linearly between nodes, controls of the current interval.
    pub fn at_time(triple: &PontryaginTriple, set: ControlSet, lipschitz: f64, t: f64) -> Result<Self> {
        let grid = &triple.grid;
        if !(0.0..=grid.horizon()).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, {}]", grid.horizon())));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::invalid("Lipschitz constant must be finite and non-negative"));
        }
        let m = grid.steps();
        let s = t / grid.step();
        // times within round-off of a node use that node's states and controls
        let (positions, k) = if (s - s.round()).abs() <= 1e-9 {
            let k = (s.round() as usize).min(m);
            (triple.states[k].clone(), k)
        } else {
            let k = (s.floor() as usize).min(m - 1);
            let theta = s - k as f64;
            let (a, b) = (triple.states[k].as_slice(), triple.states[k + 1].as_slice());
            let pos: Vec<f64> = a.iter().zip(b).map(|(p, q)| p + theta * (q - p)).collect();
            (ParticleEnsemble::new(triple.n(), triple.d(), pos)?, k)
        };
        Ok(Self { positions, controls: triple.controls.at_node(k).as_slice().to_vec(), lipschitz, set })
    }

    pub fn eval(&self, query: &[f64]) -> Result<Vec<f64>> {
        let d = self.positions.d();
        if query.len() != d {
            return Err(Error::invalid(format!("query must have {d} components")));
        }
        let mut out = vec![f64::INFINITY; d];
        for (i, p) in self.positions.particles().enumerate() {
            let dist = self.lipschitz * linalg::dist(query, p);
            for (o, u) in out.iter_mut().zip(&self.controls[i * d..(i + 1) * d]) {
                *o = o.min(u + dist);
            }
        }
        self.set.project(&mut out);
        Ok(out)
    }
}

/// `clamp_U(min_i(u_i(t) + L·|x − x_i(t)|))` per component.
pub fn mcshane_extend(triple: &PontryaginTriple, set: ControlSet, lipschitz: f64, t: f64, query: &[f64]) -> Result<Vec<f64>> {
    McShaneField::at_time(triple, set, lipschitz, t)?.eval(query)
}

/// Initial-measure samplers targeting a law on `[−1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Sampler {
    /// Midpoint quantiles `−1 + (2i − 1)/N` in one dimension, a Halton set otherwise.
    UniformQuantile,
    /// Gaussian with standard deviation `sigma`, conditioned on `[−1, 1]^d`.
    TruncatedGaussian { sigma: f64 },
}

const HALTON_BASES: [u32; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let (mut inv, mut f) = (0.0, 1.0 / b);
    while i > 0 {
        inv += f * (i % base as u64) as f64;
        i /= base as u64;
        f /= b;
    }
    inv
}

impl Sampler {
    pub fn sample(&self, n: usize, d: usize, seed: u64) -> Result<ParticleEnsemble> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("sampler needs N >= 1 and d >= 1"));
        }
        let pos: Vec<f64> = match *self {
            Sampler::UniformQuantile if d == 1 => (1..=n).map(|i| -1.0 + (2 * i - 1) as f64 / n as f64).collect(),
            Sampler::UniformQuantile => {
                if d > HALTON_BASES.len() {
                    return Err(Error::Unsupported(format!("quantile sampler supports d <= {}", HALTON_BASES.len())));
                }
                (1..=n as u64)
                    .flat_map(|i| HALTON_BASES[..d].iter().map(move |&b| 2.0 * radical_inverse(i, b) - 1.0))
                    .collect()
            }
            Sampler::TruncatedGaussian { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::invalid("sampler sigma must be positive"));
                }
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // rejection keeps the conditioned law
                normal.sample_iter(&mut rng).filter(|z: &f64| z.abs() <= 1.0).take(n * d).collect()
            }
        };
        ParticleEnsemble::new(n, d, pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub cost: f64,
    pub lip_hat: f64,
    pub w1_to_ref: f64,
    pub r_t: f64,
    pub l_t: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub reference_n: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,cost,lip_hat,w1_to_ref,r_t,l_t,converged\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.n,
                format_f64(r.cost),
                format_f64(r.lip_hat),
                format_f64(r.w1_to_ref),
                format_f64(r.r_t),
                format_f64(r.l_t),
                r.converged
            );
        }
        s
    }

    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }
}

/// Solves the problem for each `N` in `n_list` and compares trajectories with the largest-`N` member.
pub fn convergence_sweep(
    spec: &ProblemSpec,
    sampler: &Sampler,
    n_list: &[usize],
    grid: &TimeGrid,
    opts: &FbsmOptions,
    seed: u64,
) -> Result<SweepTable> {
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::invalid("sweep needs a non-empty list of positive N"));
    }
    let members: Vec<(usize, crate::pmp::FbsmSolution)> = n_list
        .par_iter()
        .map(|&n| {
            let x0 = sampler.sample(n, spec.dimension, seed.wrapping_add(n as u64))?;
            let sol = solve_fbsm(spec, &x0, grid, opts)?;
            if !sol.converged {
                log::warn!("sweep member N={n} did not converge (residual {:e})", sol.residual);
            }
            Ok((n, sol))
        })
        .collect::<Result<_>>()?;
    let (ref_idx, _) = members.iter().enumerate().max_by_key(|(i, (n, _))| (*n, usize::MAX - i)).expect("non-empty");
    let reference = &members[ref_idx].1.triple;
    let rows = members
        .par_iter()
        .map(|(n, sol)| -> Result<SweepRow> {
            let reg = lipschitz_scan(&sol.triple, None);
            let mut w1: f64 = 0.0;
            for (a, b) in sol.triple.states.iter().zip(&reference.states) {
                w1 = w1.max(wasserstein_replicated(Order::One, a, b)?);
            }
            Ok(SweepRow {
                n: *n,
                cost: sol.cost(),
                lip_hat: reg.lip_hat,
                w1_to_ref: w1,
                r_t: reg.r_t,
                l_t: reg.l_t,
                converged: sol.converged,
                iterations: sol.iterations,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { reference_n: members[ref_idx].0, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::RescaledVector;
    use crate::oracle_variance::{closed_form_triple, lipschitz_bound, to_problem_spec, VarianceInstance};
    use crate::pmp::ControlTrajectory;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::Rng;

    fn triple_from(xs: &[f64], us: &[f64]) -> PontryaginTriple {
        let x = ParticleEnsemble::from_1d(xs).unwrap();
        PontryaginTriple {
            grid: TimeGrid::new(1.0, 1).unwrap(),
            states: vec![x.clone(), x],
            costates: vec![RescaledVector::zeros(xs.len(), 1); 2],
            controls: ControlTrajectory::constant(1, RescaledVector::from_1d(us).unwrap()),
        }
    }

    fn quantile_instance(n: usize, lambda: f64) -> VarianceInstance {
        VarianceInstance::new(Sampler::UniformQuantile.sample(n, 1, 0).unwrap(), lambda, 1.0, 1.0).unwrap()
    }

    #[test]
    fn scan_examples() {
        let r = lipschitz_scan(&triple_from(&[-1.0, 0.2, 0.7], &[0.4, 0.4, 0.4]), None);
        assert_eq!(r.lip_hat, 0.0);

        let inst = quantile_instance(16, 2.0);
        let t = closed_form_triple(&inst, &TimeGrid::new(1.0, 50).unwrap()).unwrap();
        let r = lipschitz_scan(&t, None);
        assert!(r.lip_hat <= lipschitz_bound(&inst) + 1e-9);
        for (k, q) in r.profile.iter().enumerate() {
            assert!(q * (1.0 + t.grid.node(k)) <= 1.0 + 1e-9);
        }

        let x0 = ParticleEnsemble::from_1d(&[-0.6, -5e-4, 5e-4, 0.6]).unwrap();
        let inst = VarianceInstance::new(x0, 0.9, 1.0, 1.0).unwrap();
        let t = closed_form_triple(&inst, &TimeGrid::new(1.0, 50).unwrap()).unwrap();
        assert!((lipschitz_scan(&t, None).profile[0] - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_pairs_are_counted() {
        let r = lipschitz_scan(&triple_from(&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.5]), None);
        assert_eq!(r.excluded_pairs, 2);
        assert!(!r.inconclusive);
        let r = lipschitz_scan(&triple_from(&[0.3, 0.3], &[0.0, 1.0]), None);
        assert!(r.inconclusive);
    }

    #[test]
    fn mcshane_examples() {
        let t = triple_from(&[0.0, 1.0], &[0.0, 0.5]);
        let set = ControlSet::Box { bound: 1.0 };
        assert_eq!(mcshane_extend(&t, set, 1.0, 0.0, &[0.25]).unwrap(), vec![0.25]);
        assert_eq!(mcshane_extend(&t, set, 1.0, 0.0, &[1.0]).unwrap(), vec![0.5]);
        let single = triple_from(&[0.3], &[1.8]);
        let l = lipschitz_scan(&single, None).lip_hat;
        for q in [-5.0, 0.0, 0.3, 10.0] {
            assert_eq!(mcshane_extend(&single, set, l, 0.5, &[q]).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn node_times_use_node_data() {
        // 0.35 / 0.05 rounds below 7
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let states: Vec<ParticleEnsemble> = (0..=20).map(|k| ParticleEnsemble::from_1d(&[k as f64, k as f64 + 0.5]).unwrap()).collect();
        let controls = ControlTrajectory::from_intervals(
            (0..20).map(|k| RescaledVector::from_1d(&[0.01 * k as f64, 0.0]).unwrap()).collect(),
        )
        .unwrap();
        let t = PontryaginTriple { grid, costates: vec![RescaledVector::zeros(2, 1); 21], states, controls };
        let f = McShaneField::at_time(&t, ControlSet::Box { bound: 1.0 }, 1.0, 7.0 * 0.05).unwrap();
        assert_eq!(f.eval(&[7.0]).unwrap(), vec![0.07]);
    }

    #[test]
    fn mcshane_field_is_lipschitz_and_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = ControlSet::Box { bound: 0.6 };
        let n = 12;
        let x = ParticleEnsemble::new(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let u = RescaledVector::new(n, 2, (0..2 * n).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
        let t = PontryaginTriple {
            grid: TimeGrid::new(1.0, 1).unwrap(),
            states: vec![x.clone(), x.clone()],
            costates: vec![RescaledVector::zeros(n, 2); 2],
            controls: ControlTrajectory::constant(1, u.clone()),
        };
        let l = lipschitz_scan(&t, None).lip_hat;
        let f = McShaneField::at_time(&t, set, l, 0.0).unwrap();
        for i in 0..n {
            let v = f.eval(x.particle(i)).unwrap();
            assert!(linalg::dist(&v, u.entry(i)) < 1e-15);
        }
        for _ in 0..1000 {
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (a, b) = (f.eval(&p).unwrap(), f.eval(&q).unwrap());
            assert!(set.contains(&a, 0.0));
            assert!(linalg::dist(&a, &b) <= 2f64.sqrt() * l * linalg::dist(&p, &q) + 1e-9);
        }
    }

    #[test]
    fn quantile_sampler() {
        let s = Sampler::UniformQuantile.sample(4, 1, 0).unwrap();
        assert_eq!(s.as_slice(), &[-0.75, -0.25, 0.25, 0.75]);
        let s = Sampler::UniformQuantile.sample(50, 3, 0).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() <= 1.0));
        let g = Sampler::TruncatedGaussian { sigma: 0.5 };
        assert_eq!(g.sample(20, 2, 4).unwrap(), g.sample(20, 2, 4).unwrap());
        assert_ne!(g.sample(20, 2, 4).unwrap(), g.sample(20, 2, 5).unwrap());
    }

    #[test]
    fn singleton_sweep_is_self_referenced() {
        let spec = to_problem_spec(2.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let t = convergence_sweep(&spec, &Sampler::UniformQuantile, &[16], &grid, &FbsmOptions::default(), 7).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].w1_to_ref, 0.0);
        assert!(t.to_csv().starts_with("N,cost,lip_hat,w1_to_ref,r_t,l_t,converged\n16,"));
    }

    #[test]
    fn sweep_is_uniform_for_coercive_instance() {
        let spec = to_problem_spec(2.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let t = convergence_sweep(&spec, &Sampler::UniformQuantile, &[4, 8, 16, 32], &grid, &FbsmOptions::default(), 1).unwrap();
        assert!(t.all_converged());
        for w in t.rows.windows(2) {
            assert!(w[1].w1_to_ref < w[0].w1_to_ref);
            assert!((w[1].r_t - w[0].r_t).abs() < 0.5 && (w[1].l_t - w[0].l_t).abs() < 0.5);
        }
        assert!(t.rows.iter().all(|r| r.lip_hat <= 1.0 + 1e-6));
    }

    proptest! {
        #[test]
        fn scan_is_scale_and_permutation_invariant(
            xs in prop::collection::vec(-3.0f64..3.0, 2..8),
            c in 0.1f64..10.0,
            rot in 0usize..8,
        ) {
            let us: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin()).collect();
            let base = lipschitz_scan(&triple_from(&xs, &us), Some(1e-9)).lip_hat;
            let sx: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let su: Vec<f64> = us.iter().map(|u| c * u).collect();
            let scaled = lipschitz_scan(&triple_from(&sx, &su), Some(1e-9 * c)).lip_hat;
            prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
            let n = xs.len();
            let px: Vec<f64> = (0..n).map(|i| xs[(i + rot) % n]).collect();
            let pu: Vec<f64> = (0..n).map(|i| us[(i + rot) % n]).collect();
            prop_assert!(lipschitz_scan(&triple_from(&px, &pu), Some(1e-9)).lip_hat == base);
        }
    }
}
