//! Numerical checks of the stochastic maximum principle for controlled BSDEs:
//! cost evaluation, the variational equation, expansion rates, the adjoint
//! equation, the Hamiltonian and the necessary condition.
//!
//! Conventions shared with [`crate::bsde_solver`]: the variational equation
//! freezes the driver's Jacobian at `(ȳ_n, q_n, z_n, u_n)` where `ȳ_n` is
//! the regression prediction used by the explicit backward step, so it is
//! the exact derivative of the discrete state map. The adjoint uses the same
//! Jacobian, and cost gradients are taken at `(y_n, q_n, z_n, u_n)`.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bsde_solver::{
    jacobian_fd_error, mat_t_vec_acc, BsdeSolution, BsdeSolver, ControlField, Driver, Jacobian,
    Point, Shape, StepContext, TerminalSpec, TerminalValues, Trajectory,
};
use crate::error::{Error, Result};
use crate::path_engine::PathBundle;
use crate::regression::Regressor;
use crate::stats::{fit_slope, Estimate};
use crate::table::{Cell, Table};

/// Gradient of a running cost, laid out like [`Point`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    pub ly: Vec<f64>,
    pub lq: Vec<f64>,
    pub lz: Vec<f64>,
    pub lu: Vec<f64>,
}

impl CostGradient {
    pub fn new(shape: Shape) -> Self {
        Self {
            ly: vec![0.0; shape.n],
            lq: vec![0.0; shape.n * shape.d],
            lz: vec![0.0; shape.n * shape.k],
            lu: vec![0.0; shape.m],
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.ly, &mut self.lq, &mut self.lz, &mut self.lu] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `⟨l_y, dy⟩ + ⟨l_q, dq⟩ + ⟨l_z, dz⟩ + ⟨l_u, du⟩`.
    pub fn pair(&self, dir: &Point<'_>) -> f64 {
        dot(&self.ly, dir.y) + dot(&self.lq, dir.q) + dot(&self.lz, dir.z) + dot(&self.lu, dir.u)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Running cost `l(t, y, q, z, u)` and its gradient.
pub trait RunningCost: Send + Sync {
    fn eval(&self, ctx: &StepContext, point: &Point<'_>) -> f64;
    fn gradient(&self, ctx: &StepContext, point: &Point<'_>, grad: &mut CostGradient);
}

/// Initial cost `φ(y(0))` and its gradient.
pub trait InitialCost: Send + Sync {
    fn eval(&self, y0: &[f64]) -> f64;
    fn gradient(&self, y0: &[f64], out: &mut [f64]);
}

pub struct FnRunningCost<F, G> {
    f: F,
    g: G,
}

impl<F, G> FnRunningCost<F, G>
where
    F: Fn(&StepContext, &Point<'_>) -> f64 + Send + Sync,
    G: Fn(&StepContext, &Point<'_>, &mut CostGradient) + Send + Sync,
{
    pub fn new(f: F, g: G) -> Self {
        Self { f, g }
    }
}

impl<F, G> RunningCost for FnRunningCost<F, G>
where
    F: Fn(&StepContext, &Point<'_>) -> f64 + Send + Sync,
    G: Fn(&StepContext, &Point<'_>, &mut CostGradient) + Send + Sync,
{
    fn eval(&self, ctx: &StepContext, point: &Point<'_>) -> f64 {
        (self.f)(ctx, point)
    }

    fn gradient(&self, ctx: &StepContext, point: &Point<'_>, grad: &mut CostGradient) {
        grad.clear();
        (self.g)(ctx, point, grad)
    }
}

pub struct FnInitialCost<F, G> {
    f: F,
    g: G,
}

impl<F, G> FnInitialCost<F, G>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(f: F, g: G) -> Self {
        Self { f, g }
    }
}

impl<F, G> InitialCost for FnInitialCost<F, G>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, y0: &[f64]) -> f64 {
        (self.f)(y0)
    }

    fn gradient(&self, y0: &[f64], out: &mut [f64]) {
        (self.g)(y0, out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCost;

impl RunningCost for ZeroCost {
    fn eval(&self, _: &StepContext, _: &Point<'_>) -> f64 {
        0.0
    }

    fn gradient(&self, _: &StepContext, _: &Point<'_>, grad: &mut CostGradient) {
        grad.clear();
    }
}

impl InitialCost for ZeroCost {
    fn eval(&self, _: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `φ(y) = |y|²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl InitialCost for SquaredNorm {
    fn eval(&self, y0: &[f64]) -> f64 {
        dot(y0, y0)
    }

    fn gradient(&self, y0: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().zip(y0) {
            *o = 2.0 * y;
        }
    }
}

/// Admissible control values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlSet {
    Unconstrained,
    /// The box `[lo, hi]^m`.
    Box {
        lo: f64,
        hi: f64,
    },
}

impl ControlSet {
    pub fn contains(&self, u: &[f64]) -> bool {
        match *self {
            ControlSet::Unconstrained => u.iter().all(|v| v.is_finite()),
            ControlSet::Box { lo, hi } => u.iter().all(|&v| v >= lo && v <= hi),
        }
    }

    /// Deterministic low-discrepancy sample of `count` points of the set;
    /// `None` when the set is unbounded.
    pub fn sample_points(&self, m: usize, count: usize) -> Option<Vec<Vec<f64>>> {
        match *self {
            ControlSet::Unconstrained => None,
            ControlSet::Box { lo, hi } => Some(
                (1..=count)
                    .map(|i| {
                        (0..m)
                            .map(|j| lo + (hi - lo) * radical_inverse(i, PRIMES[j % PRIMES.len()]))
                            .collect()
                    })
                    .collect(),
            ),
        }
    }
}

const PRIMES: [usize; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// Van der Corput radical inverse of `i` in base `b`.
fn radical_inverse(mut i: usize, b: usize) -> f64 {
    let (mut inv, mut f) = (0.0, 1.0 / b as f64);
    while i > 0 {
        inv += f * (i % b) as f64;
        i /= b;
        f /= b as f64;
    }
    inv
}

/// A controlled BSDE together with its cost functional.
#[derive(Clone)]
pub struct ControlProblem {
    pub driver: Arc<dyn Driver>,
    pub running: Arc<dyn RunningCost>,
    pub initial: Arc<dyn InitialCost>,
    pub terminal: TerminalSpec,
    pub control_set: ControlSet,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("shape", &self.driver.shape())
            .field("terminal", &self.terminal)
            .field("control_set", &self.control_set)
            .finish_non_exhaustive()
    }
}

/// Worst relative errors found by [`ControlProblem::derivative_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub driver: f64,
    pub running: f64,
    pub initial: f64,
}

impl DerivativeCheck {
    pub fn worst(&self) -> f64 {
        self.driver.max(self.running).max(self.initial)
    }
}

impl ControlProblem {
    pub fn new(
        driver: Arc<dyn Driver>,
        running: Arc<dyn RunningCost>,
        initial: Arc<dyn InitialCost>,
        terminal: TerminalSpec,
        control_set: ControlSet,
    ) -> Result<Self> {
        if terminal.dim() != driver.shape().n {
            return Err(Error::InvalidArgument(format!(
                "terminal value has dimension {}, driver expects {}",
                terminal.dim(),
                driver.shape().n
            )));
        }
        if let ControlSet::Box { lo, hi } = control_set {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument("control box needs lo <= hi".into()));
            }
        }
        Ok(Self {
            driver,
            running,
            initial,
            terminal,
            control_set,
        })
    }

    pub fn shape(&self) -> Shape {
        self.driver.shape()
    }

    /// Compares every supplied derivative with central differences at
    /// `n_points` random points in `[-1, 1]`.
    pub fn derivative_check(
        &self,
        n_points: usize,
        step: f64,
        seed: u64,
    ) -> Result<DerivativeCheck> {
        let shape = self.shape();
        let Shape { n, d, k, m } = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let mut report = DerivativeCheck {
            driver: 0.0,
            running: 0.0,
            initial: 0.0,
        };
        let mut grad = CostGradient::new(shape);
        let mut phi_grad = vec![0.0; n];
        for i in 0..n_points {
            let mut args = [draw(n), draw(n * d), draw(n * k), draw(m)];
            let t = (i as f64 + 0.5) / n_points as f64;
            let ctx = StepContext {
                path: 0,
                step: 0,
                t,
            };
            let point = Point {
                y: &args[0],
                q: &args[1],
                z: &args[2],
                u: &args[3],
            };
            let err = jacobian_fd_error(self.driver.as_ref(), &ctx, &point, step)
                .ok_or_else(|| Error::InvalidArgument("driver provides no derivatives".into()))?;
            report.driver = report.driver.max(err);

            self.running.gradient(&ctx, &point, &mut grad);
            let analytic: Vec<f64> = [&grad.ly, &grad.lq, &grad.lz, &grad.lu]
                .into_iter()
                .flatten()
                .copied()
                .collect();
            let mut idx = 0;
            for block in 0..4 {
                for j in 0..args[block].len() {
                    let orig = args[block][j];
                    args[block][j] = orig + step;
                    let plus = self.running.eval(
                        &ctx,
                        &Point {
                            y: &args[0],
                            q: &args[1],
                            z: &args[2],
                            u: &args[3],
                        },
                    );
                    args[block][j] = orig - step;
                    let minus = self.running.eval(
                        &ctx,
                        &Point {
                            y: &args[0],
                            q: &args[1],
                            z: &args[2],
                            u: &args[3],
                        },
                    );
                    args[block][j] = orig;
                    let fd = (plus - minus) / (2.0 * step);
                    report.running = report
                        .running
                        .max((fd - analytic[idx]).abs() / analytic[idx].abs().max(1.0));
                    idx += 1;
                }
            }

            let mut y0 = args[0].clone();
            self.initial.gradient(&y0, &mut phi_grad);
            for j in 0..n {
                let orig = y0[j];
                y0[j] = orig + step;
                let plus = self.initial.eval(&y0);
                y0[j] = orig - step;
                let minus = self.initial.eval(&y0);
                y0[j] = orig;
                let fd = (plus - minus) / (2.0 * step);
                report.initial = report
                    .initial
                    .max((fd - phi_grad[j]).abs() / phi_grad[j].abs().max(1.0));
            }
        }
        Ok(report)
    }
}

/// A control and the state it generates on one bundle.
#[derive(Debug, Clone)]
pub struct AdmissiblePair {
    pub control: ControlField,
    pub state: BsdeSolution,
}

impl AdmissiblePair {
    pub fn solve(
        problem: &ControlProblem,
        solver: &BsdeSolver<'_>,
        xi: &TerminalValues,
        control: ControlField,
    ) -> Result<Self> {
        check_admissible(problem, &control)?;
        let state = solver.solve(problem.driver.as_ref(), xi, Some(&control))?;
        Ok(Self { control, state })
    }
}

fn check_admissible(problem: &ControlProblem, control: &ControlField) -> Result<()> {
    let m = problem.shape().m;
    if control.dim() != m {
        return Err(Error::InvalidArgument(format!(
            "control has dimension {}, expected {m}",
            control.dim()
        )));
    }
    for chunk in control.as_slice().chunks(m) {
        if !problem.control_set.contains(chunk) {
            return Err(Error::InvalidArgument(
                "control leaves the admissible set".into(),
            ));
        }
    }
    Ok(())
}

/// Per-path samples of `φ(y_0) + Σ_n l(t_n, y_n, q_n, z_n, u_n)·dt`.
pub fn cost_samples(problem: &ControlProblem, pair: &AdmissiblePair) -> Vec<f64> {
    cost_samples_of(problem, &pair.state, &pair.control)
}

/// [`cost_samples`] for a state and control held separately.
pub fn cost_samples_of(
    problem: &ControlProblem,
    s: &BsdeSolution,
    control: &ControlField,
) -> Vec<f64> {
    let phi = problem.initial.eval(s.y0());
    (0..s.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for n in 0..s.n_steps {
                let ctx = StepContext {
                    path: p,
                    step: n,
                    t: n as f64 * s.dt,
                };
                acc += problem.running.eval(&ctx, &state_point(s, control, n, p));
            }
            phi + acc * s.dt
        })
        .collect()
}

pub fn evaluate_cost(problem: &ControlProblem, pair: &AdmissiblePair) -> Estimate {
    Estimate::from_samples(&cost_samples(problem, pair))
}

#[inline]
fn state_point<'a>(
    s: &'a BsdeSolution,
    u: &'a ControlField,
    step: usize,
    path: usize,
) -> Point<'a> {
    Point {
        y: s.y(step, path),
        q: s.q(step, path),
        z: s.z(step, path),
        u: u.get(step, path),
    }
}

#[inline]
fn linearization_point<'a>(
    s: &'a BsdeSolution,
    u: &'a ControlField,
    step: usize,
    path: usize,
) -> Point<'a> {
    Point {
        y: s.y_pred(step, path),
        q: s.q(step, path),
        z: s.z(step, path),
        u: u.get(step, path),
    }
}

thread_local! {
    static JACOBIAN_SCRATCH: RefCell<Option<Jacobian>> = const { RefCell::new(None) };
}

fn with_jacobian<R>(shape: Shape, f: impl FnOnce(&mut Jacobian) -> R) -> R {
    JACOBIAN_SCRATCH.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().map_or(true, |j| j.shape != shape) {
            *slot = Some(Jacobian::new(shape));
        }
        f(slot.as_mut().expect("scratch initialized"))
    })
}

/// Linear driver `f_y Y + Σ f_{q^i} Q^i + Σ f_{z^i} Z^i + f_u v` with the
/// Jacobian frozen along a base pair; `v` is passed as the control.
struct LinearizedDriver<'a> {
    driver: &'a dyn Driver,
    base: &'a AdmissiblePair,
}

impl Driver for LinearizedDriver<'_> {
    fn shape(&self) -> Shape {
        self.driver.shape()
    }

    fn eval(&self, ctx: &StepContext, point: &Point<'_>, out: &mut [f64]) {
        let at = linearization_point(&self.base.state, &self.base.control, ctx.step, ctx.path);
        with_jacobian(self.driver.shape(), |jac| {
            self.driver.jacobian(ctx, &at, jac);
            out.iter_mut().for_each(|v| *v = 0.0);
            jac.apply(point, out);
        })
    }
}

fn require_jacobian(driver: &dyn Driver, pair: &AdmissiblePair) -> Result<()> {
    let ctx = StepContext {
        path: 0,
        step: 0,
        t: 0.0,
    };
    let ok = with_jacobian(driver.shape(), |jac| {
        driver.jacobian(
            &ctx,
            &linearization_point(&pair.state, &pair.control, 0, 0),
            jac,
        )
    });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "driver provides no derivatives".into(),
        ))
    }
}

/// Solves the variational BSDE along `pair` in the direction `direction`
/// (standing for `u − ū`), with terminal value zero.
pub fn solve_variational(
    problem: &ControlProblem,
    solver: &BsdeSolver<'_>,
    pair: &AdmissiblePair,
    direction: &ControlField,
) -> Result<BsdeSolution> {
    require_jacobian(problem.driver.as_ref(), pair)?;
    let lin = LinearizedDriver {
        driver: problem.driver.as_ref(),
        base: pair,
    };
    let zero = TerminalValues::zeros(problem.shape().n, solver.bundle().n_paths());
    solver.solve(&lin, &zero, Some(direction))
}

/// The first-order cost term
/// `Eφ_y(y_0)·Y_0 + E Σ_n dt [l_y·Y_n + l_q·Q_n + l_z·Z_n + l_u·v_n]`.
pub fn first_order_term(
    problem: &ControlProblem,
    pair: &AdmissiblePair,
    variation: &BsdeSolution,
    direction: &ControlField,
) -> Estimate {
    let shape = problem.shape();
    let s = &pair.state;
    let mut phi_y = vec![0.0; shape.n];
    problem.initial.gradient(s.y0(), &mut phi_y);
    let head = dot(&phi_y, variation.y0());
    let mut grad = CostGradient::new(shape);
    let samples: Vec<f64> = (0..s.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for n in 0..s.n_steps {
                let ctx = StepContext {
                    path: p,
                    step: n,
                    t: n as f64 * s.dt,
                };
                problem
                    .running
                    .gradient(&ctx, &state_point(s, &pair.control, n, p), &mut grad);
                acc += grad.pair(&state_point(variation, direction, n, p));
            }
            head + acc * s.dt
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// Forward Euler for the adjoint
/// `k_{n+1} = k_n + (f_y*k − l_y)dt + Σ(f_{q^i}*k − l_{q^i})ΔW^i + Σ(f_{z^i}*k − l_{z^i})ΔH^i`
/// from `k_0 = −φ_y(y_0)`.
pub fn solve_adjoint_general(
    problem: &ControlProblem,
    pair: &AdmissiblePair,
    bundle: &PathBundle,
) -> Result<Trajectory> {
    require_jacobian(problem.driver.as_ref(), pair)?;
    let shape = problem.shape();
    let Shape { n, d, k, .. } = shape;
    let s = &pair.state;
    let dt = s.dt;
    let mut traj = Trajectory::zeros(n, s.n_paths, s.n_steps);
    let mut k0 = vec![0.0; n];
    problem.initial.gradient(s.y0(), &mut k0);
    k0.iter_mut().for_each(|v| *v = -*v);
    let mut jac = Jacobian::new(shape);
    let mut grad = CostGradient::new(shape);
    let mut incr = vec![0.0; n];
    let mut kc = vec![0.0; n];
    let mut next_buf = vec![0.0; n];
    let bound = 1e12;
    for p in 0..s.n_paths {
        traj.get_mut(0, p).copy_from_slice(&k0);
    }
    for step in 0..s.n_steps {
        let t = step as f64 * dt;
        let mut worst: f64 = 0.0;
        for p in 0..s.n_paths {
            let ctx = StepContext { path: p, step, t };
            problem.driver.jacobian(
                &ctx,
                &linearization_point(s, &pair.control, step, p),
                &mut jac,
            );
            problem
                .running
                .gradient(&ctx, &state_point(s, &pair.control, step, p), &mut grad);
            kc.copy_from_slice(traj.get(step, p));
            let dw = bundle.dw(p, step);
            let dh = bundle.dh(p, step);
            let mut next = std::mem::take(&mut next_buf);
            next.copy_from_slice(&kc);
            incr.iter_mut().for_each(|v| *v = 0.0);
            mat_t_vec_acc(&jac.fy, n, n, &kc, &mut incr);
            for r in 0..n {
                next[r] += (incr[r] - grad.ly[r]) * dt;
            }
            for i in 0..d {
                incr.iter_mut().for_each(|v| *v = 0.0);
                mat_t_vec_acc(&jac.fq[i * n * n..][..n * n], n, n, &kc, &mut incr);
                for r in 0..n {
                    next[r] += (incr[r] - grad.lq[i * n + r]) * dw[i];
                }
            }
            for i in 0..k {
                incr.iter_mut().for_each(|v| *v = 0.0);
                mat_t_vec_acc(&jac.fz[i * n * n..][..n * n], n, n, &kc, &mut incr);
                for r in 0..n {
                    next[r] += (incr[r] - grad.lz[i * n + r]) * dh[i];
                }
            }
            for v in &next {
                worst = if v.is_finite() {
                    worst.max(v.abs())
                } else {
                    f64::INFINITY
                };
            }
            traj.get_mut(step + 1, p).copy_from_slice(&next);
            next_buf = next;
        }
        if worst > bound {
            return Err(Error::Divergence {
                step,
                value: worst,
                bound,
            });
        }
    }
    Ok(traj)
}

/// `H(t, y, q, z, u, k) = ⟨k, −f(t, y, q, z, u)⟩ + l(t, y, q, z, u)`.
pub fn hamiltonian_general(
    problem: &ControlProblem,
    ctx: &StepContext,
    point: &Point<'_>,
    k: &[f64],
) -> f64 {
    let mut f = vec![0.0; problem.shape().n];
    problem.driver.eval(ctx, point, &mut f);
    -dot(k, &f) + problem.running.eval(ctx, point)
}

/// `H_u = −f_u*k + l_u` along a pair at `(step, path)`.
pub fn hamiltonian_u(
    problem: &ControlProblem,
    pair: &AdmissiblePair,
    k: &Trajectory,
    step: usize,
    path: usize,
    out: &mut [f64],
) {
    let mut grad = CostGradient::new(problem.shape());
    hamiltonian_u_with(problem, pair, k, step, path, &mut grad, out)
}

fn hamiltonian_u_with(
    problem: &ControlProblem,
    pair: &AdmissiblePair,
    k: &Trajectory,
    step: usize,
    path: usize,
    grad: &mut CostGradient,
    out: &mut [f64],
) {
    let shape = problem.shape();
    let ctx = StepContext {
        path,
        step,
        t: step as f64 * pair.state.dt,
    };
    problem.running.gradient(
        &ctx,
        &state_point(&pair.state, &pair.control, step, path),
        grad,
    );
    out.copy_from_slice(&grad.lu);
    with_jacobian(shape, |jac| {
        problem.driver.jacobian(
            &ctx,
            &linearization_point(&pair.state, &pair.control, step, path),
            jac,
        );
        let kv = k.get(step, path);
        for c in 0..shape.m {
            let mut s = 0.0;
            for r in 0..shape.n {
                s += jac.fu[r * shape.m + c] * kv[r];
            }
            out[c] -= s;
        }
    });
}

/// `E Σ_n dt ⟨H_u, v_n⟩`, the adjoint evaluation of the first-order term.
pub fn adjoint_pairing(
    problem: &ControlProblem,
    pair: &AdmissiblePair,
    k: &Trajectory,
    direction: &ControlField,
) -> Estimate {
    let m = problem.shape().m;
    let s = &pair.state;
    let mut hu = vec![0.0; m];
    let mut grad = CostGradient::new(problem.shape());
    let samples: Vec<f64> = (0..s.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for n in 0..s.n_steps {
                hamiltonian_u_with(problem, pair, k, n, p, &mut grad, &mut hu);
                acc += dot(&hu, direction.get(n, p));
            }
            acc * s.dt
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// Outcome of [`necessary_residual`].
#[derive(Debug, Clone, PartialEq)]
pub struct NecessaryReport {
    /// `sup |H_u|` over paths and steps; reported for unconstrained controls.
    pub stationarity: Option<f64>,
    /// `min_s Ê Σ dt H_u·(u_s − ū)` over sampled points of a box.
    pub vi_min: Option<f64>,
    /// First-order cost term for each supplied direction.
    pub directional: Vec<Estimate>,
}

/// Necessary-condition residuals of a candidate pair with adjoint `k`.
pub fn necessary_residual(
    problem: &ControlProblem,
    solver: &BsdeSolver<'_>,
    pair: &AdmissiblePair,
    k: &Trajectory,
    directions: &[ControlField],
) -> Result<NecessaryReport> {
    let m = problem.shape().m;
    let s = &pair.state;
    let mut hu = vec![0.0; m];
    let samples = problem.control_set.sample_points(m, 64);
    let mut sup: f64 = 0.0;
    let mut vi = vec![0.0; samples.as_ref().map_or(0, |v| v.len())];
    let mut grad = CostGradient::new(problem.shape());
    for n in 0..s.n_steps {
        for p in 0..s.n_paths {
            hamiltonian_u_with(problem, pair, k, n, p, &mut grad, &mut hu);
            sup = hu.iter().fold(sup, |a, v| a.max(v.abs()));
            if let Some(points) = &samples {
                let ubar = pair.control.get(n, p);
                for (acc, us) in vi.iter_mut().zip(points) {
                    *acc += us
                        .iter()
                        .zip(ubar)
                        .zip(&hu)
                        .map(|((a, b), h)| h * (a - b))
                        .sum::<f64>();
                }
            }
        }
    }
    let scale = s.dt / s.n_paths as f64;
    let vi_min = samples.map(|_| vi.iter().map(|v| v * scale).fold(f64::INFINITY, f64::min));
    let mut directional = Vec::with_capacity(directions.len());
    for dir in directions {
        let var = solve_variational(problem, solver, pair, dir)?;
        directional.push(first_order_term(problem, pair, &var, dir));
    }
    Ok(NecessaryReport {
        stationarity: matches!(problem.control_set, ControlSet::Unconstrained).then_some(sup),
        vi_min,
        directional,
    })
}

/// Squared distance `E sup|Δy|² + E Σ|Δq|²dt + E Σ‖Δz‖²dt` between two solutions,
/// optionally after subtracting `eps·variation` from the first.
fn squared_deviation(
    a: &BsdeSolution,
    b: &BsdeSolution,
    variation: Option<(&BsdeSolution, f64)>,
) -> f64 {
    let diff = |x: &[f64], y: &[f64], v: Option<&[f64]>, eps: f64| -> f64 {
        x.iter()
            .zip(y)
            .enumerate()
            .map(|(i, (p, q))| {
                let d = p - q - v.map_or(0.0, |v| eps * v[i]);
                d * d
            })
            .sum()
    };
    let mut total = 0.0;
    for p in 0..a.n_paths {
        let mut sup: f64 = 0.0;
        for n in 0..=a.n_steps {
            let v = variation.map(|(v, e)| (v.y(n, p), e));
            sup = sup.max(diff(
                a.y(n, p),
                b.y(n, p),
                v.map(|x| x.0),
                v.map_or(0.0, |x| x.1),
            ));
        }
        let mut integral = 0.0;
        for n in 0..a.n_steps {
            let e = variation.map_or(0.0, |x| x.1);
            integral += diff(a.q(n, p), b.q(n, p), variation.map(|(v, _)| v.q(n, p)), e);
            integral += diff(a.z(n, p), b.z(n, p), variation.map(|(v, _)| v.z(n, p)), e);
        }
        total += sup + integral * a.dt;
    }
    total / a.n_paths as f64
}

/// Expansion rates of the state and cost in a convex perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionReport {
    pub epsilons: Vec<f64>,
    /// Squared state deviation.
    pub deviation: Vec<f64>,
    /// Squared remainder after removing the first-order term.
    pub remainder: Vec<f64>,
    /// `|J(u^ε) − J(ū) − ε·G|`.
    pub cost_residual: Vec<f64>,
    pub first_order: Estimate,
    pub slope_deviation: f64,
    pub slope_remainder: f64,
    pub slope_cost: f64,
}

impl ExpansionReport {
    pub fn deviation_slope_ok(&self) -> bool {
        (1.8..=2.2).contains(&self.slope_deviation)
    }

    /// `R(ε)/ε²` strictly decreasing as ε decreases.
    pub fn remainder_ratio_decreasing(&self) -> bool {
        strictly_decreasing(&self.ratios(&self.remainder, 2))
    }

    /// `cost residual/ε` strictly decreasing as ε decreases.
    pub fn cost_ratio_decreasing(&self) -> bool {
        strictly_decreasing(&self.ratios(&self.cost_residual, 1))
    }

    pub fn passed(&self) -> bool {
        self.deviation_slope_ok()
            && self.remainder_ratio_decreasing()
            && self.cost_ratio_decreasing()
    }

    fn ratios(&self, v: &[f64], power: i32) -> Vec<f64> {
        v.iter()
            .zip(&self.epsilons)
            .map(|(x, e)| x / e.powi(power))
            .collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new([
            "epsilon",
            "deviation",
            "remainder",
            "cost_residual",
            "remainder_over_eps2",
            "cost_residual_over_eps",
        ]);
        for i in 0..self.epsilons.len() {
            let e = self.epsilons[i];
            t.push(vec![
                Cell::Real(e),
                Cell::Real(self.deviation[i]),
                Cell::Real(self.remainder[i]),
                Cell::Real(self.cost_residual[i]),
                Cell::Real(self.remainder[i] / (e * e)),
                Cell::Real(self.cost_residual[i] / e),
            ]);
        }
        t
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Solves the state under `ū + ε(u − ū)` for every `ε` on the solver's
/// bundle and measures the expansion rates against the variational solution.
pub fn expansion_check(
    problem: &ControlProblem,
    solver: &BsdeSolver<'_>,
    ubar: &ControlField,
    u: &ControlField,
    epsilons: &[f64],
) -> Result<ExpansionReport> {
    if epsilons.len() < 2
        || epsilons.windows(2).any(|w| !(w[1] < w[0]))
        || epsilons.iter().any(|e| !(*e > 0.0))
    {
        return Err(Error::InvalidArgument(
            "epsilons must be positive and strictly decreasing".into(),
        ));
    }
    let xi = problem.terminal.evaluate(solver.bundle());
    let base = AdmissiblePair::solve(problem, solver, &xi, ubar.clone())?;
    let j0 = evaluate_cost(problem, &base).value;
    let direction = u.combine(1.0, ubar, -1.0);
    let variation = solve_variational(problem, solver, &base, &direction)?;
    let g = first_order_term(problem, &base, &variation, &direction);
    let mut report = ExpansionReport {
        epsilons: epsilons.to_vec(),
        deviation: Vec::new(),
        remainder: Vec::new(),
        cost_residual: Vec::new(),
        first_order: g,
        slope_deviation: f64::NAN,
        slope_remainder: f64::NAN,
        slope_cost: f64::NAN,
    };
    for &eps in epsilons {
        let pert = AdmissiblePair::solve(problem, solver, &xi, ubar.combine(1.0, &direction, eps))?;
        report
            .deviation
            .push(squared_deviation(&pert.state, &base.state, None));
        report.remainder.push(squared_deviation(
            &pert.state,
            &base.state,
            Some((&variation, eps)),
        ));
        report
            .cost_residual
            .push((evaluate_cost(problem, &pert).value - j0 - eps * g.value).abs());
    }
    let logs = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
    let le = logs(epsilons);
    report.slope_deviation = fit_slope(&le, &logs(&report.deviation));
    report.slope_remainder = fit_slope(&le, &logs(&report.remainder));
    report.slope_cost = fit_slope(&le, &logs(&report.cost_residual));
    Ok(report)
}

/// The two evaluations of the first-order cost term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    pub via_variational: Estimate,
    pub via_adjoint: Estimate,
    /// `E⟨Y_0, k_0⟩ + Eφ_y(y_0)·Y_0`, zero by construction of `k_0`.
    pub initial_pairing_gap: f64,
}

impl DualityReport {
    pub fn residual(&self) -> f64 {
        (self.via_variational.value - self.via_adjoint.value).abs()
    }
}

pub fn duality_check(
    problem: &ControlProblem,
    solver: &BsdeSolver<'_>,
    control: &ControlField,
    direction: &ControlField,
) -> Result<DualityReport> {
    let xi = problem.terminal.evaluate(solver.bundle());
    let pair = AdmissiblePair::solve(problem, solver, &xi, control.clone())?;
    let variation = solve_variational(problem, solver, &pair, direction)?;
    let k = solve_adjoint_general(problem, &pair, solver.bundle())?;
    let mut phi_y = vec![0.0; problem.shape().n];
    problem.initial.gradient(pair.state.y0(), &mut phi_y);
    let gap = dot(k.get(0, 0), variation.y0()) + dot(&phi_y, variation.y0());
    Ok(DualityReport {
        via_variational: first_order_term(problem, &pair, &variation, direction),
        via_adjoint: adjoint_pairing(problem, &pair, &k, direction),
        initial_pairing_gap: gap,
    })
}

/// Adapted random direction `v_n = a + Σ_j b_j·x_j(t_n)` where `x` is the
/// regression state `(W, H)` and the coefficients are standard normal draws
/// scaled by `scale`.
pub fn random_direction(
    regressor: &Regressor,
    m: usize,
    dt: f64,
    scale: f64,
    seed: u64,
) -> ControlField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = regressor.state_dim();
    let coeffs: Vec<f64> = (0..m * (dim + 1))
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ControlField::from_state_fn(m, regressor, dt, |_, x, out| {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &coeffs[c * (dim + 1)..][..dim + 1];
            *o = row[0] + row[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde_solver::{FnDriver, SolverConfig, ZeroDriver};
    use crate::levy_basis::LevyModel;
    use crate::path_engine::{simulate_paths, RngSpec, SimulationOptions, TimeGrid};
    use crate::regression::RegressionBasis;

    const S: Shape = Shape {
        n: 1,
        d: 1,
        k: 1,
        m: 1,
    };

    fn bundle(steps: usize, paths: usize) -> PathBundle {
        let m = LevyModel::reference();
        let c = m.teugel_coeffs(1).unwrap();
        simulate_paths(
            &m,
            &c,
            TimeGrid::new(1.0, steps).unwrap(),
            paths,
            RngSpec::new(5),
            &SimulationOptions::default(),
        )
        .unwrap()
    }

    struct Linear {
        a: f64,
        d: f64,
    }

    impl Driver for Linear {
        fn shape(&self) -> Shape {
            S
        }
        fn eval(&self, _: &StepContext, p: &Point<'_>, out: &mut [f64]) {
            out[0] = self.a * p.y[0] + self.d * p.u[0];
        }
        fn jacobian(&self, _: &StepContext, _: &Point<'_>, jac: &mut Jacobian) -> bool {
            jac.clear();
            jac.fy[0] = self.a;
            jac.fu[0] = self.d;
            true
        }
    }

    fn u_squared() -> Arc<dyn RunningCost> {
        Arc::new(FnRunningCost::new(
            |_: &StepContext, p: &Point<'_>| p.u[0] * p.u[0],
            |_: &StepContext, p: &Point<'_>, g: &mut CostGradient| g.lu[0] = 2.0 * p.u[0],
        ))
    }

    fn problem(
        driver: Arc<dyn Driver>,
        running: Arc<dyn RunningCost>,
        initial: Arc<dyn InitialCost>,
        xi: TerminalSpec,
    ) -> ControlProblem {
        ControlProblem::new(driver, running, initial, xi, ControlSet::Unconstrained).unwrap()
    }

    #[test]
    fn cost_examples() {
        let b = bundle(8, 40);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let p = problem(
            Arc::new(ZeroDriver(S)),
            Arc::new(ZeroCost),
            Arc::new(SquaredNorm),
            TerminalSpec::constant(vec![5.0]),
        );
        let xi = p.terminal.evaluate(&b);
        let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::zeros(1, 40, 8)).unwrap();
        let j = evaluate_cost(&p, &pair);
        assert!((j.value - 25.0).abs() < 1e-12 && j.std_err == 0.0);

        let p = problem(
            Arc::new(ZeroDriver(S)),
            u_squared(),
            Arc::new(ZeroCost),
            TerminalSpec::constant(vec![5.0]),
        );
        let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::zeros(1, 40, 8)).unwrap();
        assert_eq!(evaluate_cost(&p, &pair).value, 0.0);
        let pair =
            AdmissiblePair::solve(&p, &solver, &xi, ControlField::constant(&[1.0], 40, 8)).unwrap();
        assert!((evaluate_cost(&p, &pair).value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn variational_trivial_and_linear_cases() {
        let b = bundle(8, 300);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let term = TerminalSpec::affine(vec![1.0], vec![], vec![vec![1.0]], vec![]);
        let p = problem(
            Arc::new(Linear { a: 0.3, d: 1.0 }),
            u_squared(),
            Arc::new(SquaredNorm),
            term.clone(),
        );
        let xi = p.terminal.evaluate(&b);
        let u = random_direction(solver.regressor(), 1, b.grid().dt(), 0.5, 1);
        let v = random_direction(solver.regressor(), 1, b.grid().dt(), 0.5, 2);
        let pair = AdmissiblePair::solve(&p, &solver, &xi, u.clone()).unwrap();

        let zero = solve_variational(&p, &solver, &pair, &ControlField::zeros(1, 300, 8)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let var = solve_variational(&p, &solver, &pair, &v).unwrap();
        let shifted = AdmissiblePair::solve(&p, &solver, &xi, u.combine(1.0, &v, 1.0)).unwrap();
        for n in 0..8 {
            for path in 0..300 {
                let diff = shifted.state.y(n, path)[0] - pair.state.y(n, path)[0];
                assert!((diff - var.y(n, path)[0]).abs() < 1e-10);
            }
        }

        let no_u = problem(
            Arc::new(Linear { a: 0.3, d: 0.0 }),
            u_squared(),
            Arc::new(SquaredNorm),
            term,
        );
        let pair = AdmissiblePair::solve(&no_u, &solver, &xi, u).unwrap();
        assert_eq!(
            solve_variational(&no_u, &solver, &pair, &v)
                .unwrap()
                .max_abs(),
            0.0
        );
    }

    #[test]
    fn adjoint_examples() {
        let b = bundle(10, 20);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let term = TerminalSpec::affine(vec![1.0], vec![], vec![vec![1.0]], vec![]);
        let p = problem(
            Arc::new(Linear { a: 0.3, d: 1.0 }),
            Arc::new(ZeroCost),
            Arc::new(ZeroCost),
            term.clone(),
        );
        let xi = p.terminal.evaluate(&b);
        let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::constant(&[0.2], 20, 10))
            .unwrap();
        assert_eq!(solve_adjoint_general(&p, &pair, &b).unwrap().max_abs(), 0.0);

        let c = 0.7;
        let linear_y = Arc::new(FnRunningCost::new(
            move |_: &StepContext, pt: &Point<'_>| c * pt.y[0],
            move |_: &StepContext, _: &Point<'_>, g: &mut CostGradient| g.ly[0] = c,
        ));
        let p = problem(Arc::new(ZeroDriver(S)), linear_y, Arc::new(ZeroCost), term);
        let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::zeros(1, 20, 10)).unwrap();
        let k = solve_adjoint_general(&p, &pair, &b).unwrap();
        for n in 0..=10 {
            for path in 0..20 {
                assert!((k.get(n, path)[0] + c * n as f64 * 0.1).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let ctx = StepContext {
            path: 0,
            step: 0,
            t: 0.0,
        };
        let pt = Point {
            y: &[0.4],
            q: &[0.1],
            z: &[0.2],
            u: &[1.5],
        };
        let p = problem(
            Arc::new(Linear { a: 0.3, d: 1.0 }),
            u_squared(),
            Arc::new(ZeroCost),
            TerminalSpec::constant(vec![0.0]),
        );
        assert_eq!(hamiltonian_general(&p, &ctx, &pt, &[0.0]), 2.25);
        let p = problem(
            Arc::new(Linear { a: 0.0, d: 1.0 }),
            Arc::new(ZeroCost),
            Arc::new(ZeroCost),
            TerminalSpec::constant(vec![0.0]),
        );
        assert_eq!(hamiltonian_general(&p, &ctx, &pt, &[1.0]), -1.5);
    }

    #[test]
    fn derivative_check_flags_bad_gradients() {
        let good = problem(
            Arc::new(Linear { a: 0.3, d: 1.0 }),
            u_squared(),
            Arc::new(SquaredNorm),
            TerminalSpec::constant(vec![0.0]),
        );
        assert!(good.derivative_check(10, 1e-5, 3).unwrap().worst() < 1e-4);
        let bad_cost = Arc::new(FnRunningCost::new(
            |_: &StepContext, p: &Point<'_>| p.u[0] * p.u[0],
            |_: &StepContext, p: &Point<'_>, g: &mut CostGradient| g.lu[0] = p.u[0],
        ));
        let bad = problem(
            Arc::new(Linear { a: 0.3, d: 1.0 }),
            bad_cost,
            Arc::new(SquaredNorm),
            TerminalSpec::constant(vec![0.0]),
        );
        assert!(bad.derivative_check(10, 1e-5, 3).unwrap().running > 1e-2);
        let opaque = FnDriver::new(S, |_, p: &Point<'_>, out: &mut [f64]| out[0] = p.y[0]);
        let p = problem(
            Arc::new(opaque),
            u_squared(),
            Arc::new(SquaredNorm),
            TerminalSpec::constant(vec![0.0]),
        );
        assert!(p.derivative_check(10, 1e-5, 3).is_err());
    }

    #[test]
    fn independent_of_u_gives_zero_hu() {
        let b = bundle(6, 30);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let p = problem(
            Arc::new(Linear { a: 0.5, d: 0.0 }),
            Arc::new(ZeroCost),
            Arc::new(ZeroCost),
            TerminalSpec::constant(vec![1.0]),
        );
        let xi = p.terminal.evaluate(&b);
        let pair =
            AdmissiblePair::solve(&p, &solver, &xi, ControlField::constant(&[0.3], 30, 6)).unwrap();
        let k = solve_adjoint_general(&p, &pair, &b).unwrap();
        let rep = necessary_residual(&p, &solver, &pair, &k, &[]).unwrap();
        assert_eq!(rep.stationarity, Some(0.0));
        assert!(rep.vi_min.is_none());
    }

    #[test]
    fn box_samples_stay_inside() {
        let set = ControlSet::Box { lo: -1.0, hi: 2.0 };
        let pts = set.sample_points(3, 64).unwrap();
        assert_eq!(pts.len(), 64);
        assert!(pts.iter().all(|p| set.contains(p)));
        assert!(ControlSet::Unconstrained.sample_points(2, 64).is_none());
        assert!(!set.contains(&[2.5, 0.0, 0.0]));
    }

    #[test]
    fn box_vi_at_interior_and_boundary() {
        let b = bundle(8, 50);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let mk = |set| {
            ControlProblem::new(
                Arc::new(Linear { a: 0.0, d: 1.0 }),
                u_squared(),
                Arc::new(SquaredNorm),
                TerminalSpec::constant(vec![1.0]),
                set,
            )
            .unwrap()
        };
        let p = mk(ControlSet::Box { lo: -1.0, hi: 1.0 });
        let xi = p.terminal.evaluate(&b);
        let run = |u: f64| {
            let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::constant(&[u], 50, 8))
                .unwrap();
            let k = solve_adjoint_general(&p, &pair, &b).unwrap();
            necessary_residual(&p, &solver, &pair, &k, &[])
                .unwrap()
                .vi_min
                .unwrap()
        };
        // With f = u and φ = y², y_0 = 1 + u and H_u = 2u + 2y_0 vanishes at u = -1/2.
        assert!(run(-0.5) > -1e-10);
        assert!(run(0.8) < 0.0);
        assert!(
            AdmissiblePair::solve(&p, &solver, &xi, ControlField::constant(&[1.5], 50, 8)).is_err()
        );

        // On [0, 1] the optimum sits on the boundary u = 0 where H_u = 2 > 0.
        let p = mk(ControlSet::Box { lo: 0.0, hi: 1.0 });
        let pair = AdmissiblePair::solve(&p, &solver, &xi, ControlField::zeros(1, 50, 8)).unwrap();
        let k = solve_adjoint_general(&p, &pair, &b).unwrap();
        assert!(
            necessary_residual(&p, &solver, &pair, &k, &[])
                .unwrap()
                .vi_min
                .unwrap()
                > 0.0
        );
    }

    #[test]
    fn duality_is_exact_up_to_time_step_for_deterministic_adjoint() {
        let b = bundle(16, 200);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let term = TerminalSpec::affine(vec![1.0], vec![], vec![vec![0.5]], vec![]);
        let p = problem(
            Arc::new(Linear { a: 0.4, d: 1.0 }),
            Arc::new(ZeroCost),
            Arc::new(SquaredNorm),
            term,
        );
        let u = random_direction(solver.regressor(), 1, b.grid().dt(), 0.3, 8);
        let v = random_direction(solver.regressor(), 1, b.grid().dt(), 0.3, 9);
        let rep = duality_check(&p, &solver, &u, &v).unwrap();
        // With l = 0 and deterministic k the two evaluations coincide exactly.
        assert!(rep.residual() < 1e-10, "{rep:?}");
        assert!(rep.initial_pairing_gap.abs() < 1e-12);
    }
}
