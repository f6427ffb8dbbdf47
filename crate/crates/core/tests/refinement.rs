//! Grid-refinement behaviour of the forward integrator, the sweep solver, and the coercivity estimate.

use mfcontrol_core::coercivity::{estimate_rho, RhoOptions};
use mfcontrol_core::pmp::{integrate_forward, solve_fbsm};
use mfcontrol_core::{
    ControlCost, ControlSet, ControlTrajectory, DriftTerm, FbsmOptions, ParticleEnsemble, ProblemSpec, RescaledVector, Schedule,
    Term, TimeGrid,
};

fn swarm(n: usize) -> (ProblemSpec, ParticleEnsemble) {
    let spec = ProblemSpec {
        dimension: 1,
        drift: vec![DriftTerm::Attraction { strength: 0.7 }, DriftTerm::ConvolutionGaussian { strength: 0.8, sigma: 0.5 }],
        drift_schedule: Schedule::default(),
        running_cost: Term::PotentialGaussian { amplitude: 0.5, sigma: 0.6, center: Some(vec![0.2]) }.into(),
        running_schedule: Schedule::default(),
        final_cost: vec![Term::PotentialQuadratic { coef: 0.5, center: Some(vec![0.4]) }, Term::Variance { coef: 0.3 }].into(),
        control_cost: ControlCost::Quadratic { lambda: 1.0 },
        control_set: ControlSet::Box { bound: 5.0 },
        horizon: 1.0,
    };
    let x0 = ParticleEnsemble::from_1d(&(0..n).map(|i| -0.9 + 1.8 * i as f64 / (n - 1) as f64).collect::<Vec<_>>()).unwrap();
    (spec, x0)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_integrator_is_fourth_order() {
    let (spec, x0) = swarm(6);
    let u = RescaledVector::from_1d(&[0.3, -0.2, 0.5, 0.1, -0.4, 0.2]).unwrap();
    let end = |m: usize| {
        let grid = TimeGrid::new(1.0, m).unwrap();
        let xs = integrate_forward(&spec, &ControlTrajectory::constant(m, u.clone()), &x0, &grid).unwrap();
        xs.last().unwrap().as_slice().to_vec()
    };
    let (a, b, c) = (end(8), end(16), end(32));
    let ratio = max_diff(&a, &b) / max_diff(&b, &c);
    println!("forward refinement ratio {ratio:.2}");
    assert!(ratio >= 2f64.powf(3.5), "ratio {ratio}");
}

/// Interval controls on `m` steps against the pairwise averages on `2m` steps.
fn control_gap(coarse: &ControlTrajectory, fine: &ControlTrajectory) -> f64 {
    (0..coarse.steps())
        .map(|k| {
            let avg: Vec<f64> = fine.interval(2 * k).as_slice().iter().zip(fine.interval(2 * k + 1).as_slice()).map(|(p, q)| 0.5 * (p + q)).collect();
            max_diff(coarse.interval(k).as_slice(), &avg)
        })
        .fold(0.0, f64::max)
}

#[test]
fn sweep_controls_converge_under_refinement() {
    let (spec, x0) = swarm(6);
    let opts = FbsmOptions { omega: 0.5, tol: 1e-13, max_iters: 5000 };
    let sols: Vec<_> = [10, 20, 40]
        .iter()
        .map(|&m| solve_fbsm(&spec, &x0, &TimeGrid::new(1.0, m).unwrap(), &opts).unwrap())
        .collect();
    assert!(sols.iter().all(|s| s.converged));
    let g1 = control_gap(&sols[0].triple.controls, &sols[1].triple.controls);
    let g2 = control_gap(&sols[1].triple.controls, &sols[2].triple.controls);
    let order = (g1 / g2).log2();
    println!("control refinement gaps {g1:.3e} {g2:.3e}, order {order:.2}");
    assert!(order >= 1.8, "order {order}");
}

#[test]
fn rho_estimate_settles_under_refinement() {
    let (spec, x0) = swarm(4);
    let opts = FbsmOptions { omega: 0.5, tol: 1e-12, max_iters: 5000 };
    let rho: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&m| {
            let sol = solve_fbsm(&spec, &x0, &TimeGrid::new(1.0, m).unwrap(), &opts).unwrap();
            estimate_rho(&spec, &sol.triple, &RhoOptions::default()).unwrap().rho_hat
        })
        .collect();
    let d: Vec<f64> = rho.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    println!("rho_hat {rho:?}, differences {d:?}");
    // quadrature error is O(M⁻²): each halving of h should cut the change by about 4
    assert!(d[1] <= d[0] / 3.0 && d[2] <= d[1] / 3.0, "{d:?}");
}
