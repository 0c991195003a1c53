//! Teugel-martingale BSDEs: orthonormalized power-jump bases, path
//! simulation, regression-based backward solvers, the stochastic maximum
//! principle and the backward linear-quadratic Hamilton system.

pub mod blq_hamilton;
pub mod bsde_solver;
pub mod error;
pub mod levy_basis;
pub mod maximum_principle;
pub mod path_engine;
pub mod regression;
pub mod scenarios;
pub mod stats;
pub mod table;

pub use error::{Error, Result};
pub use levy_basis::{Atom, JumpMeasure, LevyModel, TeugelCoeffs};
pub use path_engine::{
    simulate_paths, MarkovState, PathBundle, RngSpec, SimulationOptions, TimeGrid,
};
pub use regression::{RegressionBasis, Regressor};
pub use stats::Estimate;
pub use table::{Cell, Table};
