//! Particle discretisation of mean-field optimal control problems.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod measures;
pub mod mfcalc;
pub mod problem;
pub mod pmp;
pub mod oracle_variance;
pub mod coercivity;
pub mod regularity;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use measures::{ParticleEnsemble, RescaledVector};
pub use mfcalc::{Functional, MfHessianOperator, Term};
pub use problem::{ControlCost, ControlSet, DriftTerm, ProblemSpec, Schedule};
pub use pmp::{ControlTrajectory, FbsmOptions, FbsmSolution, PontryaginTriple, TimeGrid};
pub use coercivity::{CoercivityReport, RhoMode, RhoOptions, Verdict};
pub use oracle_variance::VarianceInstance;
pub use regularity::{RegularityReport, Sampler, SweepTable};
