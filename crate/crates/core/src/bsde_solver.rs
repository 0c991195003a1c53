//! Backward induction for BSDEs driven by `W` and the Teugel martingales,
//! and Euler stepping for forward SDEs, both over a [`PathBundle`].
//!
//! Layout conventions: `q` is stored as `d` blocks of `n` values, block `i`
//! being the integrand of `dW^i`; `z` likewise has `K` blocks of `n`.
//! Trajectories and solutions are stored step-major.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::path_engine::{MarkovState, PathBundle};
use crate::regression::{RegressionBasis, Regressor};
use crate::stats::Estimate;
use crate::table::{Cell, Table};

/// Dimensions of a controlled BSDE: state `n`, Brownian `d`, Teugel `K`, control `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
}

/// Where on the grid a coefficient is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub path: usize,
    pub step: usize,
    pub t: f64,
}

/// Arguments `(y, q, z, u)` of a driver or running cost.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub y: &'a [f64],
    pub q: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

/// Partial derivatives of a driver, row-major `n×n` blocks (`fu` is `n×m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub shape: Shape,
    pub fy: Vec<f64>,
    pub fq: Vec<f64>,
    pub fz: Vec<f64>,
    pub fu: Vec<f64>,
}

impl Jacobian {
    pub fn new(shape: Shape) -> Self {
        let n = shape.n;
        Self {
            shape,
            fy: vec![0.0; n * n],
            fq: vec![0.0; shape.d * n * n],
            fz: vec![0.0; shape.k * n * n],
            fu: vec![0.0; n * shape.m],
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.fy, &mut self.fq, &mut self.fz, &mut self.fu] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `f_y · dy + Σ f_{q^i} dq^i + Σ f_{z^i} dz^i + f_u du`, accumulated into `out`.
    pub fn apply(&self, dir: &Point<'_>, out: &mut [f64]) {
        let Shape { n, d, k, m } = self.shape;
        mat_vec_acc(&self.fy, n, n, dir.y, out);
        for i in 0..d {
            mat_vec_acc(
                &self.fq[i * n * n..][..n * n],
                n,
                n,
                &dir.q[i * n..][..n],
                out,
            );
        }
        for i in 0..k {
            mat_vec_acc(
                &self.fz[i * n * n..][..n * n],
                n,
                n,
                &dir.z[i * n..][..n],
                out,
            );
        }
        mat_vec_acc(&self.fu, n, m, dir.u, out);
    }
}

/// `out += A x` for row-major `A` of size `rows × cols`.
#[inline]
pub fn mat_vec_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += a[r * cols + c] * x[c];
        }
        out[r] += s;
    }
}

/// `out += Aᵀ x` for row-major `A` of size `rows × cols`.
#[inline]
pub fn mat_t_vec_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for c in 0..cols {
        let mut s = 0.0;
        for r in 0..rows {
            s += a[r * cols + c] * x[r];
        }
        out[c] += s;
    }
}

/// Generator `f(t, y, q, z, u)` of a BSDE.
pub trait Driver: Send + Sync {
    fn shape(&self) -> Shape;

    fn eval(&self, ctx: &StepContext, point: &Point<'_>, out: &mut [f64]);

    /// Fills `jac` and returns `true` when derivatives are available.
    fn jacobian(&self, _ctx: &StepContext, _point: &Point<'_>, _jac: &mut Jacobian) -> bool {
        false
    }
}

/// Driver given by a closure, without derivatives.
pub struct FnDriver<F> {
    shape: Shape,
    f: F,
}

impl<F> FnDriver<F>
where
    F: Fn(&StepContext, &Point<'_>, &mut [f64]) + Send + Sync,
{
    pub fn new(shape: Shape, f: F) -> Self {
        Self { shape, f }
    }
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(&StepContext, &Point<'_>, &mut [f64]) + Send + Sync,
{
    fn shape(&self) -> Shape {
        self.shape
    }

    fn eval(&self, ctx: &StepContext, point: &Point<'_>, out: &mut [f64]) {
        (self.f)(ctx, point, out)
    }
}

/// `f ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDriver(pub Shape);

impl Driver for ZeroDriver {
    fn shape(&self) -> Shape {
        self.0
    }

    fn eval(&self, _: &StepContext, _: &Point<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn jacobian(&self, _: &StepContext, _: &Point<'_>, jac: &mut Jacobian) -> bool {
        jac.clear();
        true
    }
}

/// Finite-difference spot check of a driver's Jacobian; returns the worst
/// relative error `|fd − analytic| / max(1, |analytic|)`.
pub fn jacobian_fd_error(
    driver: &dyn Driver,
    ctx: &StepContext,
    point: &Point<'_>,
    step: f64,
) -> Option<f64> {
    let shape = driver.shape();
    let mut jac = Jacobian::new(shape);
    if !driver.jacobian(ctx, point, &mut jac) {
        return None;
    }
    let n = shape.n;
    let mut args = [
        point.y.to_vec(),
        point.q.to_vec(),
        point.z.to_vec(),
        point.u.to_vec(),
    ];
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for block in 0..4 {
        for idx in 0..args[block].len() {
            let orig = args[block][idx];
            args[block][idx] = orig + step;
            driver.eval(
                ctx,
                &Point {
                    y: &args[0],
                    q: &args[1],
                    z: &args[2],
                    u: &args[3],
                },
                &mut plus,
            );
            args[block][idx] = orig - step;
            driver.eval(
                ctx,
                &Point {
                    y: &args[0],
                    q: &args[1],
                    z: &args[2],
                    u: &args[3],
                },
                &mut minus,
            );
            args[block][idx] = orig;
            for r in 0..n {
                let fd = (plus[r] - minus[r]) / (2.0 * step);
                let analytic = match block {
                    0 => jac.fy[r * n + idx],
                    1 => {
                        let (i, c) = (idx / n, idx % n);
                        jac.fq[i * n * n + r * n + c]
                    }
                    2 => {
                        let (i, c) = (idx / n, idx % n);
                        jac.fz[i * n * n + r * n + c]
                    }
                    _ => jac.fu[r * shape.m + idx],
                };
                worst = worst.max((fd - analytic).abs() / analytic.abs().max(1.0));
            }
        }
    }
    Some(worst)
}

type TerminalFn = dyn Fn(&MarkovState, &mut [f64]) + Send + Sync;

/// Terminal value `ξ` as a function of the state at `T`.
#[derive(Clone)]
pub struct TerminalSpec {
    dim: usize,
    func: Arc<TerminalFn>,
}

impl std::fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalSpec")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl TerminalSpec {
    pub fn new(
        dim: usize,
        func: impl Fn(&MarkovState, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            func: Arc::new(func),
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        Self::new(value.len(), move |_, out| out.copy_from_slice(&value))
    }

    /// `ξ = c + Σ_i a_i W^i(T) + Σ_i b_i H^i(T) + ℓ·L(T)` with vector coefficients.
    pub fn affine(constant: Vec<f64>, w: Vec<Vec<f64>>, h: Vec<Vec<f64>>, l: Vec<f64>) -> Self {
        let dim = constant.len();
        Self::new(dim, move |s, out| {
            for r in 0..dim {
                let mut v = constant[r] + l.get(r).copied().unwrap_or(0.0) * s.l;
                for (i, coef) in w.iter().enumerate() {
                    v += coef[r] * s.w[i];
                }
                for (i, coef) in h.iter().enumerate() {
                    v += coef[r] * s.h[i];
                }
                out[r] = v;
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Scaled copy `s·ξ`.
    pub fn scaled(&self, s: f64) -> Self {
        let inner = self.func.clone();
        Self::new(self.dim, move |st, out| {
            inner(st, out);
            out.iter_mut().for_each(|v| *v *= s);
        })
    }

    pub fn evaluate(&self, bundle: &PathBundle) -> TerminalValues {
        let mut values = vec![0.0; bundle.n_paths() * self.dim];
        for (state, out) in bundle
            .terminal_states()
            .iter()
            .zip(values.chunks_mut(self.dim))
        {
            (self.func)(state, out);
        }
        TerminalValues {
            dim: self.dim,
            values,
        }
    }
}

/// `ξ` evaluated on every path, laid out `values[path * dim + r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalValues {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TerminalValues {
    pub fn zeros(dim: usize, n_paths: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * n_paths],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// `Ê|ξ|²`.
    pub fn mean_square(&self) -> Estimate {
        let sq: Vec<f64> = self
            .values
            .chunks(self.dim)
            .map(|v| v.iter().map(|x| x * x).sum())
            .collect();
        Estimate::from_samples(&sq)
    }
}

/// Control values per step and path, laid out step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    m: usize,
    n_paths: usize,
    n_steps: usize,
    data: Vec<f64>,
}

impl ControlField {
    pub fn zeros(m: usize, n_paths: usize, n_steps: usize) -> Self {
        Self {
            m,
            n_paths,
            n_steps,
            data: vec![0.0; m * n_paths * n_steps],
        }
    }

    pub fn constant(value: &[f64], n_paths: usize, n_steps: usize) -> Self {
        let mut c = Self::zeros(value.len(), n_paths, n_steps);
        for chunk in c.data.chunks_mut(value.len()) {
            chunk.copy_from_slice(value);
        }
        c
    }

    /// Builds an adapted control from the state `(W(t_n), H(t_n))`.
    pub fn from_state_fn(
        m: usize,
        regressor: &Regressor,
        grid_dt: f64,
        f: impl Fn(f64, &[f64], &mut [f64]),
    ) -> Self {
        let (n_paths, n_steps) = (regressor.n_paths(), regressor.n_steps());
        let mut c = Self::zeros(m, n_paths, n_steps);
        for n in 0..n_steps {
            for p in 0..n_paths {
                let i = (n * n_paths + p) * m;
                f(
                    n as f64 * grid_dt,
                    regressor.state(n, p),
                    &mut c.data[i..i + m],
                );
            }
        }
        c
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn get(&self, step: usize, path: usize) -> &[f64] {
        &self.data[(step * self.n_paths + path) * self.m..][..self.m]
    }

    #[inline]
    pub fn get_mut(&mut self, step: usize, path: usize) -> &mut [f64] {
        &mut self.data[(step * self.n_paths + path) * self.m..][..self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ControlField, b: f64) -> ControlField {
        assert_eq!(self.data.len(), other.data.len());
        ControlField {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ..*self
        }
    }

    pub fn scaled(&self, s: f64) -> ControlField {
        ControlField {
            data: self.data.iter().map(|x| s * x).collect(),
            ..*self
        }
    }

    /// `sqrt(Ê Σ_n |u_n|² dt)`.
    pub fn norm(&self, dt: f64) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() * dt / self.n_paths as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Per-path trajectory of a forward process on grid times `t_0..t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(dim: usize, n_paths: usize, n_steps: usize) -> Self {
        Self {
            dim,
            n_paths,
            n_steps,
            data: vec![0.0; dim * n_paths * (n_steps + 1)],
        }
    }

    #[inline]
    pub fn get(&self, step: usize, path: usize) -> &[f64] {
        &self.data[(step * self.n_paths + path) * self.dim..][..self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, step: usize, path: usize) -> &mut [f64] {
        &mut self.data[(step * self.n_paths + path) * self.dim..][..self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `Ê sup_n |x_n|²`.
    pub fn sup_norm_sq(&self) -> Estimate {
        let per_path: Vec<f64> = (0..self.n_paths)
            .map(|p| {
                (0..=self.n_steps)
                    .map(|n| self.get(n, p).iter().map(|v| v * v).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .collect();
        Estimate::from_samples(&per_path)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Coefficients `(b, g, σ)` of a forward SDE, evaluated at left endpoints.
pub trait ForwardCoefficients: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes the drift (`n`), the `dW` loadings (`d` blocks of `n`) and the
    /// `dH` loadings (`K` blocks of `n`).
    fn eval(&self, ctx: &StepContext, x: &[f64], drift: &mut [f64], dw: &mut [f64], dh: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Abort when any `|y|` exceeds this bound.
    pub divergence_bound: f64,
    /// Re-evaluate the driver once at the provisional `y_n`.
    pub correction_pass: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            divergence_bound: 1e12,
            correction_pass: false,
        }
    }
}

/// Solution `(y, q, z)` with per-step diagnostics.
///
/// `y_pred[n]` is the regression estimate `Ê[y_{n+1} | F_n]`, the point at
/// which the explicit step evaluates the driver.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub shape: Shape,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    y: Vec<f64>,
    y_pred: Vec<f64>,
    q: Vec<f64>,
    z: Vec<f64>,
    pub condition_numbers: Vec<f64>,
}

impl BsdeSolution {
    #[inline]
    pub fn y(&self, step: usize, path: usize) -> &[f64] {
        let n = self.shape.n;
        &self.y[(step * self.n_paths + path) * n..][..n]
    }

    #[inline]
    pub fn y_pred(&self, step: usize, path: usize) -> &[f64] {
        let n = self.shape.n;
        &self.y_pred[(step * self.n_paths + path) * n..][..n]
    }

    #[inline]
    pub fn q(&self, step: usize, path: usize) -> &[f64] {
        let w = self.shape.n * self.shape.d;
        &self.q[(step * self.n_paths + path) * w..][..w]
    }

    #[inline]
    pub fn z(&self, step: usize, path: usize) -> &[f64] {
        let w = self.shape.n * self.shape.k;
        &self.z[(step * self.n_paths + path) * w..][..w]
    }

    /// `y(t_0)`, identical on every path.
    pub fn y0(&self) -> &[f64] {
        self.y(0, 0)
    }

    pub fn is_finite(&self) -> bool {
        [&self.y, &self.q, &self.z]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute difference to another solution over `y`, `q`, `z`.
    pub fn max_abs_diff(&self, other: &BsdeSolution) -> f64 {
        [
            (&self.y, &other.y),
            (&self.q, &other.q),
            (&self.z, &other.z),
        ]
        .iter()
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
    }

    /// `a·self + b·other`, componentwise. For a driver that is linear in
    /// `(y, q, z, u)` the discrete solution map is affine, so this equals the
    /// solution for the combined terminal value and control.
    pub fn combine(&self, a: f64, other: &BsdeSolution, b: f64) -> BsdeSolution {
        assert_eq!(self.y.len(), other.y.len());
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| a * u + b * v).collect();
        BsdeSolution {
            shape: self.shape,
            n_paths: self.n_paths,
            n_steps: self.n_steps,
            dt: self.dt,
            y: mix(&self.y, &other.y),
            y_pred: mix(&self.y_pred, &other.y_pred),
            q: mix(&self.q, &other.q),
            z: mix(&self.z, &other.z),
            condition_numbers: self.condition_numbers.clone(),
        }
    }

    /// Worst of `max|s·self − other| / max|self|` over `y`, `q` and `z`
    /// taken separately; a zero block must stay zero.
    pub fn scaling_error(&self, other: &BsdeSolution, s: f64) -> f64 {
        [
            (&self.y, &other.y),
            (&self.q, &other.q),
            (&self.z, &other.z),
        ]
        .iter()
        .map(|(a, b)| scaling_error(a, b, s))
        .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        [&self.y, &self.q, &self.z]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |a, x| a.max(x.abs()))
    }

    /// Cross-path mean of `z` (K blocks of `n`) at each step.
    pub fn mean_z(&self, step: usize) -> Vec<f64> {
        mean_over_paths(self.n_paths, |p| self.z(step, p))
    }

    pub fn mean_q(&self, step: usize) -> Vec<f64> {
        mean_over_paths(self.n_paths, |p| self.q(step, p))
    }

    pub fn mean_y(&self, step: usize) -> Vec<f64> {
        mean_over_paths(self.n_paths, |p| self.y(step, p))
    }

    /// `(path, step, t, y…, q…, z…)` for the first `max_paths` paths.
    pub fn to_table(&self, max_paths: usize) -> Table {
        let Shape { n, d, k, .. } = self.shape;
        let mut cols = vec!["path".to_string(), "step".into(), "t".into()];
        cols.extend((1..=n).map(|r| format!("y_{r}")));
        for i in 1..=d {
            cols.extend((1..=n).map(|r| format!("q{i}_{r}")));
        }
        for i in 1..=k {
            cols.extend((1..=n).map(|r| format!("z{i}_{r}")));
        }
        let mut t = Table::new(cols);
        for p in 0..self.n_paths.min(max_paths) {
            for s in 0..self.n_steps {
                let mut row = vec![Cell::from(p), Cell::from(s), Cell::Real(s as f64 * self.dt)];
                row.extend(self.y(s, p).iter().map(|&v| Cell::Real(v)));
                row.extend(self.q(s, p).iter().map(|&v| Cell::Real(v)));
                row.extend(self.z(s, p).iter().map(|&v| Cell::Real(v)));
                t.push(row);
            }
        }
        t
    }
}

fn mean_over_paths<'a>(n_paths: usize, get: impl Fn(usize) -> &'a [f64]) -> Vec<f64> {
    let mut acc = get(0).to_vec();
    for p in 1..n_paths {
        for (a, b) in acc.iter_mut().zip(get(p)) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n_paths as f64);
    acc
}

/// Backward solver bound to one bundle; the regression factors are computed
/// once and reused by every solve.
pub struct BsdeSolver<'a> {
    bundle: &'a PathBundle,
    regressor: Regressor,
    config: SolverConfig,
}

impl<'a> BsdeSolver<'a> {
    pub fn new(
        bundle: &'a PathBundle,
        basis: &RegressionBasis,
        config: SolverConfig,
    ) -> Result<Self> {
        Ok(Self {
            bundle,
            regressor: Regressor::new(bundle, basis)?,
            config,
        })
    }

    pub fn bundle(&self) -> &'a PathBundle {
        self.bundle
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn dt(&self) -> f64 {
        self.bundle.grid().dt()
    }

    /// Backward induction: `y_N = ξ`, then for `n = N−1..0`
    /// `ȳ_n = Ê[y_{n+1} | F_n]`, `q^i_n = Ê[(y_{n+1} − ȳ_n)ΔW^i_n | F_n]/dt`,
    /// `z^i_n = Ê[(y_{n+1} − ȳ_n)ΔH^i_n | F_n]/dt` and
    /// `y_n = ȳ_n + f(t_n, ȳ_n, q_n, z_n, u_n)·dt`.
    pub fn solve(
        &self,
        driver: &dyn Driver,
        terminal: &TerminalValues,
        control: Option<&ControlField>,
    ) -> Result<BsdeSolution> {
        let bundle = self.bundle;
        let shape = driver.shape();
        let Shape { n, d, k, m } = shape;
        let n_paths = bundle.n_paths();
        let n_steps = bundle.n_steps();
        if d != bundle.brownian_dim() || k != bundle.level() {
            return Err(Error::InvalidArgument(format!(
                "driver expects d={d}, K={k}; bundle has d={}, K={}",
                bundle.brownian_dim(),
                bundle.level()
            )));
        }
        if terminal.dim != n || terminal.values.len() != n * n_paths {
            return Err(Error::InvalidArgument(
                "terminal value does not match the driver".into(),
            ));
        }
        if let Some(c) = control {
            if c.dim() != m || c.n_paths() != n_paths || c.n_steps() != n_steps {
                return Err(Error::InvalidArgument(
                    "control does not match the bundle".into(),
                ));
            }
        }
        let zero_u = vec![0.0; m];
        let dt = bundle.grid().dt();
        let mart_w = (d + k) * n;

        let mut y = vec![0.0; (n_steps + 1) * n_paths * n];
        let mut y_pred = vec![0.0; n_steps * n_paths * n];
        let mut q = vec![0.0; n_steps * n_paths * d * n];
        let mut z = vec![0.0; n_steps * n_paths * k * n];
        y[n_steps * n_paths * n..].copy_from_slice(&terminal.values);

        let mut mart = vec![0.0; n_paths * mart_w];
        let mut fitted = vec![0.0; n_paths * mart_w];
        let mut f = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        let mut resid = vec![0.0; n];

        for step in (0..n_steps).rev() {
            let t = bundle.grid().time(step);
            let (head, tail) = y.split_at_mut((step + 1) * n_paths * n);
            let next = &tail[..n_paths * n];
            let cur = &mut head[step * n_paths * n..];
            let pred = &mut y_pred[step * n_paths * n..][..n_paths * n];
            self.regressor.project(step, next, n, pred);

            for p in 0..n_paths {
                for r in 0..n {
                    resid[r] = next[p * n + r] - pred[p * n + r];
                }
                let row = &mut mart[p * mart_w..][..mart_w];
                let dw = bundle.dw(p, step);
                let dh = bundle.dh(p, step);
                for i in 0..d {
                    for r in 0..n {
                        row[i * n + r] = resid[r] * dw[i] / dt;
                    }
                }
                for i in 0..k {
                    for r in 0..n {
                        row[(d + i) * n + r] = resid[r] * dh[i] / dt;
                    }
                }
            }
            self.regressor.project(step, &mart, mart_w, &mut fitted);

            let q_step = &mut q[step * n_paths * d * n..][..n_paths * d * n];
            let z_step = &mut z[step * n_paths * k * n..][..n_paths * k * n];
            let mut worst: f64 = 0.0;
            for p in 0..n_paths {
                let row = &fitted[p * mart_w..][..mart_w];
                q_step[p * d * n..][..d * n].copy_from_slice(&row[..d * n]);
                z_step[p * k * n..][..k * n].copy_from_slice(&row[d * n..]);
                let ctx = StepContext { path: p, step, t };
                let u = control.map_or(&zero_u[..], |c| c.get(step, p));
                let ybar = &pred[p * n..][..n];
                let point = Point {
                    y: ybar,
                    q: &row[..d * n],
                    z: &row[d * n..],
                    u,
                };
                driver.eval(&ctx, &point, &mut f);
                let out = &mut cur[p * n..][..n];
                for r in 0..n {
                    out[r] = ybar[r] + f[r] * dt;
                }
                if self.config.correction_pass {
                    let provisional = out.to_vec();
                    driver.eval(
                        &ctx,
                        &Point {
                            y: &provisional,
                            ..point
                        },
                        &mut f2,
                    );
                    for r in 0..n {
                        out[r] = ybar[r] + f2[r] * dt;
                    }
                }
                for v in out.iter() {
                    worst = if v.is_finite() {
                        worst.max(v.abs())
                    } else {
                        f64::INFINITY
                    };
                }
            }
            if worst > self.config.divergence_bound {
                return Err(Error::Divergence {
                    step,
                    value: worst,
                    bound: self.config.divergence_bound,
                });
            }
        }

        Ok(BsdeSolution {
            shape,
            n_paths,
            n_steps,
            dt,
            y,
            y_pred,
            q,
            z,
            condition_numbers: self.regressor.condition_numbers(),
        })
    }

    pub fn solve_forward(
        &self,
        coeffs: &dyn ForwardCoefficients,
        initial: &[f64],
    ) -> Result<Trajectory> {
        solve_forward_sde(coeffs, initial, self.bundle, self.config.divergence_bound)
    }
}

/// One-shot convenience around [`BsdeSolver`].
pub fn solve_bsde(
    driver: &dyn Driver,
    terminal: &TerminalSpec,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    control: Option<&ControlField>,
) -> Result<BsdeSolution> {
    let solver = BsdeSolver::new(bundle, basis, SolverConfig::default())?;
    solver.solve(driver, &terminal.evaluate(bundle), control)
}

/// Euler scheme with left-endpoint coefficients:
/// `X_{n+1} = X_n + b dt + Σ g^i ΔW^i + Σ σ^i ΔH^i`.
pub fn solve_forward_sde(
    coeffs: &dyn ForwardCoefficients,
    initial: &[f64],
    bundle: &PathBundle,
    divergence_bound: f64,
) -> Result<Trajectory> {
    let n = coeffs.dim();
    if initial.len() != n {
        return Err(Error::InvalidArgument(
            "initial value has the wrong dimension".into(),
        ));
    }
    let d = bundle.brownian_dim();
    let k = bundle.level();
    let n_paths = bundle.n_paths();
    let n_steps = bundle.n_steps();
    let dt = bundle.grid().dt();
    let mut traj = Trajectory::zeros(n, n_paths, n_steps);
    for p in 0..n_paths {
        traj.get_mut(0, p).copy_from_slice(initial);
    }
    let mut drift = vec![0.0; n];
    let mut gw = vec![0.0; d * n];
    let mut gh = vec![0.0; k * n];
    let mut x = vec![0.0; n];
    for step in 0..n_steps {
        let t = bundle.grid().time(step);
        let mut worst: f64 = 0.0;
        for p in 0..n_paths {
            x.copy_from_slice(traj.get(step, p));
            coeffs.eval(
                &StepContext { path: p, step, t },
                &x,
                &mut drift,
                &mut gw,
                &mut gh,
            );
            let dw = bundle.dw(p, step);
            let dh = bundle.dh(p, step);
            let out = traj.get_mut(step + 1, p);
            for r in 0..n {
                let mut v = x[r] + drift[r] * dt;
                for i in 0..d {
                    v += gw[i * n + r] * dw[i];
                }
                for i in 0..k {
                    v += gh[i * n + r] * dh[i];
                }
                out[r] = v;
                worst = if v.is_finite() {
                    worst.max(v.abs())
                } else {
                    f64::INFINITY
                };
            }
        }
        if worst > divergence_bound {
            return Err(Error::Divergence {
                step,
                value: worst,
                bound: divergence_bound,
            });
        }
    }
    Ok(traj)
}

/// `max|s·a − b| / max|a|`, or `max|b|` when `a` vanishes.
pub fn scaling_error(a: &[f64], b: &[f64], s: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (s * x - y).abs())
        .fold(0.0f64, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Monte Carlo estimates of `E sup|y|²`, `E∫|q|²dt` and `E∫‖z‖²dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormTriple {
    pub y_sup: Estimate,
    pub q_int: Estimate,
    pub z_int: Estimate,
}

pub fn a_priori_norms(solution: &BsdeSolution) -> NormTriple {
    let n_paths = solution.n_paths;
    let dt = solution.dt;
    let mut y_sup = vec![0.0; n_paths];
    let mut q_int = vec![0.0; n_paths];
    let mut z_int = vec![0.0; n_paths];
    for p in 0..n_paths {
        for s in 0..=solution.n_steps {
            let v: f64 = solution.y(s, p).iter().map(|x| x * x).sum();
            y_sup[p] = f64::max(y_sup[p], v);
        }
        for s in 0..solution.n_steps {
            q_int[p] += solution.q(s, p).iter().map(|x| x * x).sum::<f64>() * dt;
            z_int[p] += solution.z(s, p).iter().map(|x| x * x).sum::<f64>() * dt;
        }
    }
    NormTriple {
        y_sup: Estimate::from_samples(&y_sup),
        q_int: Estimate::from_samples(&q_int),
        z_int: Estimate::from_samples(&z_int),
    }
}

/// Variance of the one-step increments `y_{n+1} - Ê[y_{n+1} | F_n]` that the
/// `q dW + z dH` terms fail to reproduce, summed over steps. With `f` linear this
/// is the part of the terminal variance outside the span of `W` and the first
/// `K` Teugel martingales, plus regression error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationResidual {
    pub unexplained: Estimate,
    pub total: Estimate,
}

impl TruncationResidual {
    /// Unexplained share of the total increment variance, in `[0, 1]` up to noise.
    pub fn fraction(&self) -> f64 {
        if self.total.value > 0.0 {
            self.unexplained.value / self.total.value
        } else {
            0.0
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["quantity", "value", "std_err"]);
        for (name, e) in [("unexplained", self.unexplained), ("total", self.total)] {
            t.push(vec![
                Cell::from(name),
                Cell::from(e.value),
                Cell::from(e.std_err),
            ]);
        }
        t.push(vec![
            Cell::from("fraction"),
            Cell::from(self.fraction()),
            Cell::from(f64::NAN),
        ]);
        t
    }
}

pub fn truncation_residual(
    solution: &BsdeSolution,
    bundle: &PathBundle,
) -> Result<TruncationResidual> {
    let Shape { n, d, k, .. } = solution.shape;
    if bundle.n_paths() != solution.n_paths
        || bundle.n_steps() != solution.n_steps
        || bundle.level() != k
    {
        return Err(Error::InvalidArgument(
            "solution does not match the bundle".into(),
        ));
    }
    let mut unexplained = vec![0.0; solution.n_paths];
    let mut total = vec![0.0; solution.n_paths];
    for p in 0..solution.n_paths {
        for s in 0..solution.n_steps {
            let (dw, dh) = (bundle.dw(p, s), bundle.dh(p, s));
            let (q, z) = (solution.q(s, p), solution.z(s, p));
            for r in 0..n {
                let jump = solution.y(s + 1, p)[r] - solution.y_pred(s, p)[r];
                let fitted: f64 = (0..d).map(|i| q[i * n + r] * dw[i]).sum::<f64>()
                    + (0..k).map(|i| z[i * n + r] * dh[i]).sum::<f64>();
                total[p] += jump * jump;
                unexplained[p] += (jump - fitted).powi(2);
            }
        }
    }
    Ok(TruncationResidual {
        unexplained: Estimate::from_samples(&unexplained),
        total: Estimate::from_samples(&total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_basis::LevyModel;
    use crate::path_engine::{simulate_paths, RngSpec, SimulationOptions, TimeGrid};

    fn bundle(level: usize, steps: usize, paths: usize) -> PathBundle {
        let m = LevyModel::reference();
        let c = m.teugel_coeffs(level).unwrap();
        simulate_paths(
            &m,
            &c,
            TimeGrid::new(1.0, steps).unwrap(),
            paths,
            RngSpec::new(17),
            &SimulationOptions::default(),
        )
        .unwrap()
    }

    fn scalar(k: usize) -> Shape {
        Shape {
            n: 1,
            d: 1,
            k,
            m: 1,
        }
    }

    struct Constant(Vec<f64>, Vec<f64>, Vec<f64>);

    impl ForwardCoefficients for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, _: &StepContext, _: &[f64], b: &mut [f64], g: &mut [f64], s: &mut [f64]) {
            b.copy_from_slice(&self.0);
            g.copy_from_slice(&self.1);
            s.copy_from_slice(&self.2);
        }
    }

    #[test]
    fn constant_terminal_zero_driver() {
        let b = bundle(2, 8, 500);
        let sol = solve_bsde(
            &ZeroDriver(scalar(2)),
            &TerminalSpec::constant(vec![5.0]),
            &b,
            &RegressionBasis::default(),
            None,
        )
        .unwrap();
        for s in 0..=8 {
            for p in 0..500 {
                assert!((sol.y(s, p)[0] - 5.0).abs() < 1e-12);
            }
        }
        for s in 0..8 {
            for p in 0..500 {
                assert!(sol.q(s, p)[0].abs() < 1e-12);
                assert!(sol.z(s, p).iter().all(|v| v.abs() < 1e-12));
            }
        }
        let norms = a_priori_norms(&sol);
        assert!((norms.y_sup.value - 25.0).abs() < 1e-10);
        assert!(norms.q_int.value.abs() < 1e-20);
        assert!(norms.z_int.value.abs() < 1e-20);
    }

    #[test]
    fn terminal_consistency_and_shape_checks() {
        let b = bundle(1, 4, 50);
        let term = TerminalSpec::affine(vec![1.0], vec![vec![0.5]], vec![vec![2.0]], vec![]);
        let values = term.evaluate(&b);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let sol = solver.solve(&ZeroDriver(scalar(1)), &values, None).unwrap();
        for p in 0..50 {
            assert_eq!(sol.y(4, p)[0], values.values[p]);
        }
        assert!(solver.solve(&ZeroDriver(scalar(2)), &values, None).is_err());
    }

    #[test]
    fn divergence_guard() {
        let b = bundle(1, 8, 50);
        let driver = FnDriver::new(scalar(1), |_, pt: &Point<'_>, out: &mut [f64]| {
            out[0] = 1e3 * pt.y[0]
        });
        let solver = BsdeSolver::new(
            &b,
            &RegressionBasis::default(),
            SolverConfig {
                divergence_bound: 1e6,
                ..Default::default()
            },
        )
        .unwrap();
        let err = solver
            .solve(
                &driver,
                &TerminalValues {
                    dim: 1,
                    values: vec![1.0; 50],
                },
                None,
            )
            .unwrap_err();
        assert!(err.to_string().contains("divergence"));
    }

    #[test]
    fn forward_trivial_cases() {
        let b = bundle(1, 8, 30);
        let still = solve_forward_sde(&Constant(vec![0.0], vec![0.0], vec![0.0]), &[7.0], &b, 1e12)
            .unwrap();
        for s in 0..=8 {
            for p in 0..30 {
                assert_eq!(still.get(s, p)[0], 7.0);
            }
        }
        let brownian =
            solve_forward_sde(&Constant(vec![0.0], vec![1.0], vec![0.0]), &[0.0], &b, 1e12)
                .unwrap();
        let teugel =
            solve_forward_sde(&Constant(vec![0.0], vec![0.0], vec![1.0]), &[0.0], &b, 1e12)
                .unwrap();
        for p in 0..30 {
            let s = b.terminal_state(p);
            assert_eq!(brownian.get(8, p)[0], s.w[0]);
            assert_eq!(teugel.get(8, p)[0], s.h[0]);
        }
    }

    #[test]
    fn exponential_driver_matches_discrete_recursion() {
        let b = bundle(1, 16, 100);
        let driver = FnDriver::new(scalar(1), |_, pt: &Point<'_>, out: &mut [f64]| {
            out[0] = 0.5 * pt.y[0]
        });
        let sol = solve_bsde(
            &driver,
            &TerminalSpec::constant(vec![1.0]),
            &b,
            &RegressionBasis::default(),
            None,
        )
        .unwrap();
        let expected = (1.0 + 0.5 / 16.0f64).powi(16);
        assert!((sol.y0()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn correction_pass_moves_toward_implicit_step() {
        let b = bundle(1, 4, 50);
        let driver = FnDriver::new(scalar(1), |_, pt: &Point<'_>, out: &mut [f64]| {
            out[0] = 0.5 * pt.y[0]
        });
        let cfg = SolverConfig {
            correction_pass: true,
            ..Default::default()
        };
        let solver = BsdeSolver::new(&b, &RegressionBasis::default(), cfg).unwrap();
        let sol = solver
            .solve(
                &driver,
                &TerminalValues {
                    dim: 1,
                    values: vec![1.0; 50],
                },
                None,
            )
            .unwrap();
        let h = 0.25;
        let per_step: f64 = 1.0 + 0.5 * h * (1.0 + 0.5 * h);
        assert!((sol.y0()[0] - per_step.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn linear_in_terminal_value() {
        let b = bundle(2, 8, 400);
        let solver =
            BsdeSolver::new(&b, &RegressionBasis::default(), SolverConfig::default()).unwrap();
        let driver = FnDriver::new(scalar(2), |_, pt: &Point<'_>, out: &mut [f64]| {
            out[0] = 0.3 * pt.y[0] - 0.2 * pt.q[0] + 0.4 * pt.z[1]
        });
        let term = TerminalSpec::affine(
            vec![0.5],
            vec![vec![1.0]],
            vec![vec![1.0], vec![-0.5]],
            vec![],
        );
        let xi = term.evaluate(&b);
        let a = solver.solve(&driver, &xi, None).unwrap();
        let s = solver.solve(&driver, &xi.scaled(3.0), None).unwrap();
        for step in 0..8 {
            for p in 0..400 {
                assert!((3.0 * a.y(step, p)[0] - s.y(step, p)[0]).abs() < 1e-10);
                assert!((3.0 * a.z(step, p)[1] - s.z(step, p)[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_spot_check_catches_wrong_derivative() {
        struct Wrong;
        impl Driver for Wrong {
            fn shape(&self) -> Shape {
                Shape {
                    n: 1,
                    d: 1,
                    k: 1,
                    m: 1,
                }
            }
            fn eval(&self, _: &StepContext, p: &Point<'_>, out: &mut [f64]) {
                out[0] = p.y[0].sin() + p.u[0];
            }
            fn jacobian(&self, _: &StepContext, _: &Point<'_>, jac: &mut Jacobian) -> bool {
                jac.clear();
                jac.fy[0] = 1.0;
                jac.fu[0] = 1.0;
                true
            }
        }
        let ctx = StepContext {
            path: 0,
            step: 0,
            t: 0.0,
        };
        let pt = Point {
            y: &[1.0],
            q: &[0.0],
            z: &[0.0],
            u: &[0.0],
        };
        let err = jacobian_fd_error(&Wrong, &ctx, &pt, 1e-5).unwrap();
        assert!(err > 0.1);
        assert!(jacobian_fd_error(&ZeroDriver(scalar(1)), &ctx, &pt, 1e-5).unwrap() < 1e-12);
    }
}
