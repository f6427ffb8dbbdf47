//! Closed forms for the one-dimensional variance-maximisation problem
//! `min ∫(λ/2)|u|² dt − ½ Var(μ(T))` with `v = 0`, `L = 0` and `U = [−C, C]`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{ParticleEnsemble, RescaledVector};
use crate::mfcalc::Term;
use crate::pmp::{ControlTrajectory, PontryaginTriple, TimeGrid};
use crate::problem::{ControlCost, ControlSet, ProblemSpec, Schedule};

/// Centred one-dimensional instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceInstance {
    x0: ParticleEnsemble,
    pub lambda: f64,
    pub horizon: f64,
    pub bound: f64,
}

impl VarianceInstance {
    pub fn new(x0: ParticleEnsemble, lambda: f64, horizon: f64, bound: f64) -> Result<Self> {
        if x0.d() != 1 {
            return Err(Error::invalid("variance oracle is one-dimensional"));
        }
        let scale = x0.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if x0.mean()[0].abs() > 1e-12 * scale {
            return Err(Error::invalid("variance oracle needs centred initial data"));
        }
        if !(lambda > 0.0 && horizon > 0.0 && bound > 0.0) || ![lambda, horizon, bound].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("lambda, horizon and bound must be positive and finite"));
        }
        Ok(Self { x0, lambda, horizon, bound })
    }

    pub fn x0(&self) -> &ParticleEnsemble {
        &self.x0
    }

    pub fn n(&self) -> usize {
        self.x0.n()
    }
}

/// The problem data as a [`ProblemSpec`].
pub fn to_problem_spec(lambda: f64, horizon: f64, bound: f64) -> ProblemSpec {
    ProblemSpec {
        dimension: 1,
        drift: Vec::new(),
        drift_schedule: Schedule::default(),
        running_cost: Default::default(),
        running_schedule: Schedule::default(),
        final_cost: Term::Variance { coef: -0.5 }.into(),
        control_cost: ControlCost::Quadratic { lambda },
        control_set: ControlSet::Box { bound },
        horizon,
    }
}

impl VarianceInstance {
    pub fn spec(&self) -> ProblemSpec {
        to_problem_spec(self.lambda, self.horizon, self.bound)
    }
}

/// Time-constant optimal controls.
pub fn closed_form_control(inst: &VarianceInstance) -> RescaledVector {
    let rho = inst.lambda - inst.horizon;
    let c = inst.bound;
    let u: Vec<f64> = inst
        .x0
        .as_slice()
        .iter()
        .map(|&x| {
            if rho > 0.0 {
                (x / rho).clamp(-c, c)
            } else if x == 0.0 {
                0.0
            } else {
                x.signum() * c
            }
        })
        .collect();
    RescaledVector::new(inst.n(), 1, u).expect("finite controls")
}

/// Sharp coercivity constant `λ − T`.
pub fn closed_form_rho(lambda: f64, horizon: f64) -> f64 {
    lambda - horizon
}

/// `(1/2N) Σ_i (T(λ−T)u_i² − 2T x_i⁰ u_i − |x_i⁰|²)` for time-constant controls.
///
/// This is the total cost whenever `Σ u_i = 0`; otherwise the true cost exceeds it by `T² ū²/2`.
pub fn discrete_cost(inst: &VarianceInstance, u: &RescaledVector) -> Result<f64> {
    if (u.n(), u.d()) != (inst.n(), 1) {
        return Err(Error::DimensionMismatch { expected_n: inst.n(), expected_d: 1, found_n: u.n(), found_d: u.d() });
    }
    let (l, t) = (inst.lambda, inst.horizon);
    let s: f64 = inst
        .x0
        .as_slice()
        .iter()
        .zip(u.as_slice())
        .map(|(x, u)| t * (l - t) * u * u - 2.0 * t * x * u - x * x)
        .sum();
    Ok(s / (2.0 * inst.n() as f64))
}

/// Uniform Lipschitz constant `1/(λ − T)` of the optimal controls, infinite when `λ ≤ T`.
pub fn lipschitz_bound(inst: &VarianceInstance) -> f64 {
    let rho = closed_form_rho(inst.lambda, inst.horizon);
    if rho > 0.0 {
        1.0 / rho
    } else {
        f64::INFINITY
    }
}

/// Pontryagin triple built from the closed-form controls on `grid`.
pub fn closed_form_triple(inst: &VarianceInstance, grid: &TimeGrid) -> Result<PontryaginTriple> {
    let u = closed_form_control(inst);
    let n = inst.n();
    let states: Vec<ParticleEnsemble> = grid
        .nodes()
        .map(|t| {
            let pos = inst.x0.as_slice().iter().zip(u.as_slice()).map(|(x, u)| x + u * t).collect();
            ParticleEnsemble::new(n, 1, pos)
        })
        .collect::<Result<_>>()?;
    let xt = states.last().expect("grid has nodes");
    let mean = xt.mean()[0];
    let r = RescaledVector::new(n, 1, xt.as_slice().iter().map(|x| x - mean).collect())?;
    Ok(PontryaginTriple {
        grid: *grid,
        costates: vec![r; grid.steps() + 1],
        controls: ControlTrajectory::constant(grid.steps(), u),
        states,
    })
}
