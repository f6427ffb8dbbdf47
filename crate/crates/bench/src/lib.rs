//! Benchmark fixtures shared by the criterion targets.

use mfcontrol_core::oracle_variance::to_problem_spec;
use mfcontrol_core::{ControlCost, ControlSet, DriftTerm, ParticleEnsemble, ProblemSpec, Sampler, Schedule, Term};

/// Variance-maximisation instance with `n` quantile particles.
pub fn variance_fixture(lambda: f64, n: usize) -> (ProblemSpec, ParticleEnsemble) {
    (to_problem_spec(lambda, 1.0, 1.0), Sampler::UniformQuantile.sample(n, 1, 0).expect("n > 0"))
}

/// Two-dimensional swarm with nonlocal drift and quartic control cost.
pub fn swarm_fixture(n: usize) -> (ProblemSpec, ParticleEnsemble) {
    let spec = ProblemSpec {
        dimension: 2,
        drift: vec![DriftTerm::Attraction { strength: 0.5 }, DriftTerm::ConvolutionGaussian { strength: 0.3, sigma: 0.5 }],
        drift_schedule: Schedule::default(),
        running_cost: Term::PotentialQuadratic { coef: 0.5, center: Some(vec![0.5, 0.0]) }.into(),
        running_schedule: Schedule::default(),
        final_cost: Term::Variance { coef: 0.5 }.into(),
        control_cost: ControlCost::QuadraticQuartic { lambda: 1.0, kappa: 0.5 },
        control_set: ControlSet::Ball { radius: 1.0 },
        horizon: 1.0,
    };
    (spec, Sampler::TruncatedGaussian { sigma: 0.5 }.sample(n, 2, 1).expect("n > 0"))
}
