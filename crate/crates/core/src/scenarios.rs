//! Ready-made nonlinear control problems used by the verification suite and
//! the command-line front end. All are scalar (`n = m = d = 1`).

use std::sync::Arc;

use crate::bsde_solver::{ControlField, Driver, Jacobian, Point, Shape, StepContext, TerminalSpec};
use crate::maximum_principle::{
    ControlProblem, ControlSet, CostGradient, FnRunningCost, SquaredNorm,
};
use crate::regression::Regressor;

/// `f = a·sin(y) + b·z¹ + u`.
#[derive(Debug, Clone, Copy)]
pub struct SineDriver {
    pub k: usize,
    pub a: f64,
    pub b: f64,
}

impl Driver for SineDriver {
    fn shape(&self) -> Shape {
        Shape {
            n: 1,
            d: 1,
            k: self.k,
            m: 1,
        }
    }

    fn eval(&self, _: &StepContext, p: &Point<'_>, out: &mut [f64]) {
        out[0] = self.a * p.y[0].sin() + self.b * p.z[0] + p.u[0];
    }

    fn jacobian(&self, _: &StepContext, p: &Point<'_>, jac: &mut Jacobian) -> bool {
        jac.clear();
        jac.fy[0] = self.a * p.y[0].cos();
        jac.fz[0] = self.b;
        jac.fu[0] = 1.0;
        true
    }
}

/// `f = a·y + sin(u)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSineControlDriver {
    pub k: usize,
    pub a: f64,
}

impl Driver for LinearSineControlDriver {
    fn shape(&self) -> Shape {
        Shape {
            n: 1,
            d: 1,
            k: self.k,
            m: 1,
        }
    }

    fn eval(&self, _: &StepContext, p: &Point<'_>, out: &mut [f64]) {
        out[0] = self.a * p.y[0] + p.u[0].sin();
    }

    fn jacobian(&self, _: &StepContext, p: &Point<'_>, jac: &mut Jacobian) -> bool {
        jac.clear();
        jac.fy[0] = self.a;
        jac.fu[0] = p.u[0].cos();
        true
    }
}

/// Expansion-rate problem: `f = 0.5·sin(y) + 0.3·z¹ + u`,
/// `l = y² + q² + u²`, `φ = y²`, `ξ = 1 + 0.5·H¹(T)`.
pub fn expansion_problem(k: usize) -> ControlProblem {
    let running = FnRunningCost::new(
        |_: &StepContext, p: &Point<'_>| p.y[0] * p.y[0] + p.q[0] * p.q[0] + p.u[0] * p.u[0],
        |_: &StepContext, p: &Point<'_>, g: &mut CostGradient| {
            g.ly[0] = 2.0 * p.y[0];
            g.lq[0] = 2.0 * p.q[0];
            g.lu[0] = 2.0 * p.u[0];
        },
    );
    let mut h = vec![vec![0.0]; k];
    h[0][0] = 0.5;
    ControlProblem::new(
        Arc::new(SineDriver { k, a: 0.5, b: 0.3 }),
        Arc::new(running),
        Arc::new(SquaredNorm),
        TerminalSpec::affine(vec![1.0], vec![], h, vec![]),
        ControlSet::Unconstrained,
    )
    .expect("consistent dimensions")
}

/// Base control `ū = 0.2·H¹(t_n)` and perturbed control `u = ū + 1 + 0.5·W(t_n)`.
pub fn expansion_controls(regressor: &Regressor, dt: f64) -> (ControlField, ControlField) {
    let ubar = ControlField::from_state_fn(1, regressor, dt, |_, x, out| out[0] = 0.2 * x[1]);
    let u = ControlField::from_state_fn(1, regressor, dt, |_, x, out| {
        out[0] = 0.2 * x[1] + 1.0 + 0.5 * x[0]
    });
    (ubar, u)
}

/// Duality problem with a deterministic adjoint: `f = 0.4·y + sin(u)`,
/// `l = 0.5·y + u²`, `φ = y²`, `ξ = 1 + 0.5·H¹(T)`.
pub fn duality_problem(k: usize) -> ControlProblem {
    let running = FnRunningCost::new(
        |_: &StepContext, p: &Point<'_>| 0.5 * p.y[0] + p.u[0] * p.u[0],
        |_: &StepContext, p: &Point<'_>, g: &mut CostGradient| {
            g.ly[0] = 0.5;
            g.lu[0] = 2.0 * p.u[0];
        },
    );
    let mut h = vec![vec![0.0]; k];
    h[0][0] = 0.5;
    ControlProblem::new(
        Arc::new(LinearSineControlDriver { k, a: 0.4 }),
        Arc::new(running),
        Arc::new(SquaredNorm),
        TerminalSpec::affine(vec![1.0], vec![], h, vec![]),
        ControlSet::Unconstrained,
    )
    .expect("consistent dimensions")
}

/// Control `u = 0.3·H¹(t_n)` and direction `v = 1 + 0.5·W(t_n)`.
pub fn duality_controls(regressor: &Regressor, dt: f64) -> (ControlField, ControlField) {
    let u = ControlField::from_state_fn(1, regressor, dt, |_, x, out| out[0] = 0.3 * x[1]);
    let v = ControlField::from_state_fn(1, regressor, dt, |_, x, out| out[0] = 1.0 + 0.5 * x[0]);
    (u, v)
}
