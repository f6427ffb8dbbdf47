//! Solve, analyse and extend a two-dimensional swarm problem through the public API.

use mfcontrol_core::coercivity::{estimate_rho, sufficient_margin, RhoOptions};
use mfcontrol_core::pmp::{pmp_residual, solve_fbsm};
use mfcontrol_core::regularity::{lipschitz_scan, McShaneField, Sampler};
use mfcontrol_core::{ControlCost, ControlSet, DriftTerm, FbsmOptions, ProblemSpec, Schedule, Term, TimeGrid, Verdict};

fn spec() -> ProblemSpec {
    ProblemSpec {
        dimension: 2,
        drift: vec![DriftTerm::Attraction { strength: 0.5 }, DriftTerm::ConvolutionGaussian { strength: 0.3, sigma: 0.5 }],
        drift_schedule: Schedule { breakpoints: vec![0.5], values: vec![1.0, 0.5] },
        running_cost: Term::PotentialQuadratic { coef: 0.5, center: Some(vec![0.5, 0.0]) }.into(),
        running_schedule: Schedule::default(),
        final_cost: vec![Term::Variance { coef: 0.5 }, Term::InteractionGaussian { amplitude: 0.2, sigma: 0.7 }].into(),
        control_cost: ControlCost::QuadraticQuartic { lambda: 1.0, kappa: 0.5 },
        control_set: ControlSet::Ball { radius: 0.4 },
        horizon: 1.0,
    }
}

#[test]
fn swarm_pipeline() {
    let spec = spec();
    let x0 = Sampler::TruncatedGaussian { sigma: 0.5 }.sample(10, 2, 3).unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let sol = solve_fbsm(&spec, &x0, &grid, &FbsmOptions { omega: 0.5, ..FbsmOptions::default() }).unwrap();
    assert!(sol.converged);
    assert!(sol.triple.controls.all_in(&spec.control_set, 1e-12));
    assert!(pmp_residual(&spec, &sol.triple).unwrap() < 1e-8);

    let report = estimate_rho(&spec, &sol.triple, &RhoOptions::default()).unwrap();
    assert!(report.symmetry_error < 1e-8);
    let margin = sufficient_margin(&spec, &sol.triple).unwrap();
    if margin.margin > 0.0 {
        assert_eq!(report.verdict, Verdict::Holds);
    }

    let scan = lipschitz_scan(&sol.triple, None);
    assert!(scan.lip_hat.is_finite() && !scan.inconclusive);
    let field = McShaneField::at_time(&sol.triple, spec.control_set, scan.lip_hat, 0.0).unwrap();
    let u0 = sol.triple.controls.at_node(0);
    for (i, p) in x0.particles().enumerate() {
        let v = field.eval(p).unwrap();
        assert!(v.iter().zip(u0.entry(i)).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
