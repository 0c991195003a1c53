//! Backward linear-quadratic control: the linear state BSDE, the quadratic
//! cost, its Fréchet gradient, the adjoint SDE, and the coupled Hamilton
//! system solved by damped Picard iteration.
//!
//! The state is driven by `f = A y + Σ B^i q^i + Σ C^i z^i + D u` and the
//! cost is `E⟨M y(0), y(0)⟩ + E∫ ⟨Ey,y⟩ + Σ⟨F^i q^i,q^i⟩ + Σ⟨G^i z^i,z^i⟩ + ⟨Nu,u⟩ dt`.
//! Stationarity of the Hamiltonian gives the control law `u = ½ N⁻¹ D* k`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::bsde_solver::{
    a_priori_norms, mat_t_vec_acc, mat_vec_acc, scaling_error, BsdeSolution, BsdeSolver,
    ControlField, Driver, Jacobian, Point, Shape, StepContext, TerminalSpec, TerminalValues,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::maximum_principle::{
    cost_samples_of, ControlProblem, ControlSet, CostGradient, InitialCost, RunningCost,
};
use crate::path_engine::{PathBundle, TimeGrid};
use crate::stats::{fit_quadratic, Estimate};
use crate::table::{Cell, Table};

/// Smallest eigenvalue accepted for the positive semidefinite weights.
pub const PSD_TOL: f64 = -1e-10;

type MatrixFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// A deterministic matrix coefficient, constant or given as a function of time.
#[derive(Clone)]
pub enum Coefficient {
    Constant(DMatrix<f64>),
    TimeVarying(Arc<MatrixFn>),
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficient::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Coefficient::TimeVarying(_) => f.write_str("TimeVarying(..)"),
        }
    }
}

impl Coefficient {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Coefficient::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Coefficient::Constant(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Coefficient::Constant(DMatrix::identity(n, n) * s)
    }

    pub fn time_varying(f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Coefficient::TimeVarying(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            Coefficient::Constant(m) => m.clone(),
            Coefficient::TimeVarying(f) => f(t),
        }
    }
}

/// Data of a BLQ problem, with coefficient roles named after what they multiply.
#[derive(Debug, Clone)]
pub struct BlqSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    /// `A`: `n×n`.
    pub drift_y: Coefficient,
    /// `B^i`: `d` matrices `n×n`.
    pub drift_q: Vec<Coefficient>,
    /// `C^i`: `K` matrices `n×n`.
    pub drift_z: Vec<Coefficient>,
    /// `D`: `n×m`.
    pub drift_u: Coefficient,
    /// `E`: `n×n`.
    pub weight_y: Coefficient,
    /// `F^i`: `d` matrices `n×n`.
    pub weight_q: Vec<Coefficient>,
    /// `G^i`: `K` matrices `n×n`.
    pub weight_z: Vec<Coefficient>,
    /// `N`: `m×m`.
    pub weight_u: Coefficient,
    /// `M`: `n×n`, constant.
    pub weight_y0: DMatrix<f64>,
    pub terminal: TerminalSpec,
    /// Required lower bound `δ` on the spectrum of `N`.
    pub positivity: f64,
}

impl BlqSpec {
    /// All coefficients zero except `N = I`.
    pub fn new(n: usize, m: usize, d: usize, k: usize, terminal: TerminalSpec) -> Self {
        let sq = || Coefficient::zeros(n, n);
        Self {
            n,
            m,
            d,
            k,
            drift_y: sq(),
            drift_q: (0..d).map(|_| sq()).collect(),
            drift_z: (0..k).map(|_| sq()).collect(),
            drift_u: Coefficient::zeros(n, m),
            weight_y: sq(),
            weight_q: (0..d).map(|_| sq()).collect(),
            weight_z: (0..k).map(|_| sq()).collect(),
            weight_u: Coefficient::identity(m),
            weight_y0: DMatrix::zeros(n, n),
            terminal,
            positivity: 1e-8,
        }
    }

    /// The scalar benchmark: `D = M = N = 1`, every other coefficient zero.
    pub fn scalar_benchmark(k: usize, terminal: TerminalSpec) -> Self {
        let mut s = Self::new(1, 1, 1, k, terminal);
        s.drift_u = Coefficient::identity(1);
        s.weight_y0 = DMatrix::identity(1, 1);
        s
    }

    pub fn shape(&self) -> Shape {
        Shape {
            n: self.n,
            d: self.d,
            k: self.k,
            m: self.m,
        }
    }

    pub fn with_terminal(&self, terminal: TerminalSpec) -> Self {
        Self {
            terminal,
            ..self.clone()
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Coefficients frozen at one grid time, row-major.
#[derive(Debug, Clone, PartialEq)]
struct FrozenStep {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    n: Vec<f64>,
    /// `½ N⁻¹ D*`, `m×n`.
    gain: Vec<f64>,
}

/// A validated BLQ problem with coefficients frozen at the left endpoint of
/// every step.
#[derive(Debug, Clone)]
pub struct BlqSystem {
    spec: BlqSpec,
    grid: TimeGrid,
    steps: Arc<Vec<FrozenStep>>,
    m0: Vec<f64>,
    coupling_factor: f64,
}

fn check_dims(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::InvalidArgument(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn min_symmetric_eigen(name: &'static str, m: &DMatrix<f64>, t: f64) -> Result<f64> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Assumption {
            assumption: match name {
                "N" => "N not symmetric",
                "E" => "E not symmetric",
                "F" => "F not symmetric",
                "G" => "G not symmetric",
                _ => "M not symmetric",
            },
            time: t,
            detail: "matrix differs from its transpose".into(),
        });
    }
    Ok(SymmetricEigen::new(m.clone()).eigenvalues.min())
}

fn check_psd(name: &'static str, label: &'static str, m: &DMatrix<f64>, t: f64) -> Result<()> {
    let min = min_symmetric_eigen(name, m, t)?;
    if min < PSD_TOL {
        return Err(Error::Assumption {
            assumption: label,
            time: t,
            detail: format!("smallest eigenvalue {min:.3e}"),
        });
    }
    Ok(())
}

/// Checks the standing assumptions on the grid and freezes the coefficients.
pub fn validate_blq(spec: &BlqSpec, grid: &TimeGrid) -> Result<BlqSystem> {
    let (n, m, d, k) = (spec.n, spec.m, spec.d, spec.k);
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument(
            "state and control dimensions must be positive".into(),
        ));
    }
    if spec.drift_q.len() != d
        || spec.weight_q.len() != d
        || spec.drift_z.len() != k
        || spec.weight_z.len() != k
    {
        return Err(Error::InvalidArgument(
            "number of B, C, F, G matrices does not match (d, K)".into(),
        ));
    }
    if spec.terminal.dim() != n {
        return Err(Error::InvalidArgument(format!(
            "terminal value has dimension {}, expected {n}",
            spec.terminal.dim()
        )));
    }
    if !(spec.positivity > 0.0) {
        return Err(Error::InvalidArgument(
            "positivity bound must be positive".into(),
        ));
    }
    check_dims("M", &spec.weight_y0, n, n)?;
    check_psd("M", "M not PSD", &spec.weight_y0, 0.0)?;

    let mut steps = Vec::with_capacity(grid.n_steps());
    let (mut sup_d, mut sup_ninv): (f64, f64) = (0.0, 0.0);
    for step in 0..=grid.n_steps() {
        let t = grid.time(step);
        let a = spec.drift_y.at(t);
        let dm = spec.drift_u.at(t);
        let e = spec.weight_y.at(t);
        let nm = spec.weight_u.at(t);
        check_dims("A", &a, n, n)?;
        check_dims("D", &dm, n, m)?;
        check_dims("E", &e, n, n)?;
        check_dims("N", &nm, m, m)?;
        let bs: Vec<_> = spec.drift_q.iter().map(|c| c.at(t)).collect();
        let cs: Vec<_> = spec.drift_z.iter().map(|c| c.at(t)).collect();
        let fs: Vec<_> = spec.weight_q.iter().map(|c| c.at(t)).collect();
        let gs: Vec<_> = spec.weight_z.iter().map(|c| c.at(t)).collect();
        for x in bs.iter().chain(&cs).chain(&fs).chain(&gs) {
            check_dims("B/C/F/G", x, n, n)?;
        }
        let all = [&a, &dm, &e, &nm]
            .into_iter()
            .chain(&bs)
            .chain(&cs)
            .chain(&fs)
            .chain(&gs);
        for x in all {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Assumption {
                    assumption: "coefficients not uniformly bounded",
                    time: t,
                    detail: "non-finite entry".into(),
                });
            }
        }
        check_psd("E", "E not PSD", &e, t)?;
        for f in &fs {
            check_psd("F", "F not PSD", f, t)?;
        }
        for g in &gs {
            check_psd("G", "G not PSD", g, t)?;
        }
        let n_min = min_symmetric_eigen("N", &nm, t)?;
        if n_min < spec.positivity {
            return Err(Error::Assumption {
                assumption: "N not uniformly positive",
                time: t,
                detail: format!(
                    "smallest eigenvalue {n_min:.3e} below {:.3e}",
                    spec.positivity
                ),
            });
        }
        let n_inv = nm
            .clone()
            .cholesky()
            .expect("positive definite N")
            .inverse();
        sup_d = sup_d.max(dm.clone().singular_values().max());
        sup_ninv = sup_ninv.max(1.0 / n_min);
        if step == grid.n_steps() {
            break;
        }
        let stack = |v: &[DMatrix<f64>]| v.iter().flat_map(row_major).collect::<Vec<_>>();
        steps.push(FrozenStep {
            a: row_major(&a),
            b: stack(&bs),
            c: stack(&cs),
            d: row_major(&dm),
            e: row_major(&e),
            f: stack(&fs),
            g: stack(&gs),
            n: row_major(&nm),
            gain: row_major(&(n_inv * dm.transpose() * 0.5)),
        });
    }
    let m_norm = SymmetricEigen::new(spec.weight_y0.clone())
        .eigenvalues
        .amax();
    let coupling_factor = grid.horizon() * m_norm * sup_ninv * sup_d * sup_d;
    if coupling_factor > 1.0 {
        log::warn!(
            "coupling factor T·|M|·|N⁻¹|·|D|² = {coupling_factor:.3} exceeds 1; Picard iteration may need stronger damping"
        );
    }
    Ok(BlqSystem {
        spec: spec.clone(),
        grid: *grid,
        steps: Arc::new(steps),
        m0: row_major(&spec.weight_y0),
        coupling_factor,
    })
}

/// Driver `A y + Σ B^i q^i + Σ C^i z^i + D u` with frozen coefficients.
#[derive(Debug, Clone)]
pub struct BlqDriver {
    shape: Shape,
    steps: Arc<Vec<FrozenStep>>,
}

impl Driver for BlqDriver {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn eval(&self, ctx: &StepContext, p: &Point<'_>, out: &mut [f64]) {
        let Shape { n, d, k, m } = self.shape;
        let s = &self.steps[ctx.step];
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&s.a, n, n, p.y, out);
        for i in 0..d {
            mat_vec_acc(&s.b[i * n * n..][..n * n], n, n, &p.q[i * n..][..n], out);
        }
        for i in 0..k {
            mat_vec_acc(&s.c[i * n * n..][..n * n], n, n, &p.z[i * n..][..n], out);
        }
        mat_vec_acc(&s.d, n, m, p.u, out);
    }

    fn jacobian(&self, ctx: &StepContext, _: &Point<'_>, jac: &mut Jacobian) -> bool {
        let s = &self.steps[ctx.step];
        jac.fy.copy_from_slice(&s.a);
        jac.fq.copy_from_slice(&s.b);
        jac.fz.copy_from_slice(&s.c);
        jac.fu.copy_from_slice(&s.d);
        true
    }
}

/// Quadratic running cost with frozen weights.
#[derive(Debug, Clone)]
pub struct BlqRunningCost {
    shape: Shape,
    steps: Arc<Vec<FrozenStep>>,
}

/// `⟨A x, x⟩` for row-major square `A`.
fn quad(a: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut v = 0.0;
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += a[r * n + c] * x[c];
        }
        v += s * x[r];
    }
    v
}

impl RunningCost for BlqRunningCost {
    fn eval(&self, ctx: &StepContext, p: &Point<'_>) -> f64 {
        let Shape { n, d, k, m } = self.shape;
        let s = &self.steps[ctx.step];
        debug_assert_eq!(p.u.len(), m);
        let mut v = quad(&s.e, p.y);
        for i in 0..d {
            v += quad(&s.f[i * n * n..][..n * n], &p.q[i * n..][..n]);
        }
        for i in 0..k {
            v += quad(&s.g[i * n * n..][..n * n], &p.z[i * n..][..n]);
        }
        v + quad(&s.n, p.u)
    }

    fn gradient(&self, ctx: &StepContext, p: &Point<'_>, g: &mut CostGradient) {
        let Shape { n, d, k, m } = self.shape;
        let s = &self.steps[ctx.step];
        g.clear();
        mat_vec_acc(&s.e, n, n, p.y, &mut g.ly);
        for i in 0..d {
            mat_vec_acc(
                &s.f[i * n * n..][..n * n],
                n,
                n,
                &p.q[i * n..][..n],
                &mut g.lq[i * n..][..n],
            );
        }
        for i in 0..k {
            mat_vec_acc(
                &s.g[i * n * n..][..n * n],
                n,
                n,
                &p.z[i * n..][..n],
                &mut g.lz[i * n..][..n],
            );
        }
        mat_vec_acc(&s.n, m, m, p.u, &mut g.lu);
        for v in [&mut g.ly, &mut g.lq, &mut g.lz, &mut g.lu] {
            v.iter_mut().for_each(|x| *x *= 2.0);
        }
    }
}

/// `φ(y) = ⟨My, y⟩`.
#[derive(Debug, Clone)]
pub struct BlqInitialCost {
    m0: Vec<f64>,
}

impl InitialCost for BlqInitialCost {
    fn eval(&self, y0: &[f64]) -> f64 {
        quad(&self.m0, y0)
    }

    fn gradient(&self, y0: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.m0, y0.len(), y0.len(), y0, out);
        out.iter_mut().for_each(|v| *v *= 2.0);
    }
}

impl BlqSystem {
    pub fn spec(&self) -> &BlqSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape()
    }

    /// `T·‖M‖·sup‖N⁻¹‖·sup‖D‖²`, a rough indicator of how hard the
    /// undamped Picard map couples state and control.
    pub fn coupling_factor(&self) -> f64 {
        self.coupling_factor
    }

    pub fn driver(&self) -> BlqDriver {
        BlqDriver {
            shape: self.shape(),
            steps: self.steps.clone(),
        }
    }

    pub fn running_cost(&self) -> BlqRunningCost {
        BlqRunningCost {
            shape: self.shape(),
            steps: self.steps.clone(),
        }
    }

    pub fn initial_cost(&self) -> BlqInitialCost {
        BlqInitialCost {
            m0: self.m0.clone(),
        }
    }

    /// The same problem in the general maximum-principle form.
    pub fn control_problem(&self) -> ControlProblem {
        ControlProblem::new(
            Arc::new(self.driver()),
            Arc::new(self.running_cost()),
            Arc::new(self.initial_cost()),
            self.spec.terminal.clone(),
            ControlSet::Unconstrained,
        )
        .expect("dimensions validated")
    }

    fn check_bundle(&self, bundle: &PathBundle) -> Result<()> {
        if bundle.grid() != &self.grid
            || bundle.brownian_dim() != self.spec.d
            || bundle.level() != self.spec.k
        {
            return Err(Error::InvalidArgument(
                "bundle does not match the validated grid and dimensions".into(),
            ));
        }
        Ok(())
    }

    /// `H = −⟨k, f⟩ + l` with the coefficients frozen at `step`.
    pub fn hamiltonian(&self, step: usize, point: &Point<'_>, k: &[f64]) -> f64 {
        let ctx = StepContext {
            path: 0,
            step,
            t: self.grid.time(step),
        };
        let mut f = vec![0.0; self.spec.n];
        self.driver().eval(&ctx, point, &mut f);
        -k.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + self.running_cost().eval(&ctx, point)
    }

    /// `H_u = 2Nu − D*k` at `step`.
    pub fn hamiltonian_u(&self, step: usize, u: &[f64], k: &[f64], out: &mut [f64]) {
        let (n, m) = (self.spec.n, self.spec.m);
        let s = &self.steps[step];
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&s.n, m, m, u, out);
        out.iter_mut().for_each(|v| *v *= 2.0);
        for (c, o) in out.iter_mut().enumerate() {
            for r in 0..n {
                *o -= s.d[r * m + c] * k[r];
            }
        }
    }
}

/// Solves the state BSDE under `u` on the solver's bundle.
pub fn solve_state(
    sys: &BlqSystem,
    solver: &BsdeSolver<'_>,
    xi: &TerminalValues,
    u: &ControlField,
) -> Result<BsdeSolution> {
    sys.check_bundle(solver.bundle())?;
    solver.solve(&sys.driver(), xi, Some(u))
}

/// Monte Carlo estimate of the cost for a solved state.
pub fn blq_cost(sys: &BlqSystem, state: &BsdeSolution, u: &ControlField) -> Estimate {
    Estimate::from_samples(&cost_samples_of(&sys.control_problem(), state, u))
}

/// Forward Euler for
/// `dk = (A*k − 2Ey)dt + Σ(B^{i*}k − 2F^i q^i)dW^i + Σ(C^{i*}k − 2G^i z^i)dH^i`
/// from `k(0) = −2M y(0)`.
pub fn solve_adjoint(
    sys: &BlqSystem,
    state: &BsdeSolution,
    bundle: &PathBundle,
) -> Result<Trajectory> {
    sys.check_bundle(bundle)?;
    let Shape { n, d, k, .. } = sys.shape();
    let dt = state.dt;
    let mut traj = Trajectory::zeros(n, state.n_paths, state.n_steps);
    let mut k0 = vec![0.0; n];
    sys.initial_cost().gradient(state.y0(), &mut k0);
    k0.iter_mut().for_each(|v| *v = -*v);
    for p in 0..state.n_paths {
        traj.get_mut(0, p).copy_from_slice(&k0);
    }
    let bound = 1e12;
    let mut kc = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ey = vec![0.0; n];
    for step in 0..state.n_steps {
        let s = &sys.steps[step];
        let mut worst: f64 = 0.0;
        for p in 0..state.n_paths {
            kc.copy_from_slice(traj.get(step, p));
            next.copy_from_slice(&kc);
            let y = state.y(step, p);
            let q = state.q(step, p);
            let z = state.z(step, p);
            let dw = bundle.dw(p, step);
            let dh = bundle.dh(p, step);

            tmp.iter_mut().for_each(|v| *v = 0.0);
            mat_t_vec_acc(&s.a, n, n, &kc, &mut tmp);
            ey.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_acc(&s.e, n, n, y, &mut ey);
            for r in 0..n {
                next[r] += (tmp[r] - 2.0 * ey[r]) * dt;
            }
            for i in 0..d {
                tmp.iter_mut().for_each(|v| *v = 0.0);
                mat_t_vec_acc(&s.b[i * n * n..][..n * n], n, n, &kc, &mut tmp);
                ey.iter_mut().for_each(|v| *v = 0.0);
                mat_vec_acc(&s.f[i * n * n..][..n * n], n, n, &q[i * n..][..n], &mut ey);
                for r in 0..n {
                    next[r] += (tmp[r] - 2.0 * ey[r]) * dw[i];
                }
            }
            for i in 0..k {
                tmp.iter_mut().for_each(|v| *v = 0.0);
                mat_t_vec_acc(&s.c[i * n * n..][..n * n], n, n, &kc, &mut tmp);
                ey.iter_mut().for_each(|v| *v = 0.0);
                mat_vec_acc(&s.g[i * n * n..][..n * n], n, n, &z[i * n..][..n], &mut ey);
                for r in 0..n {
                    next[r] += (tmp[r] - 2.0 * ey[r]) * dh[i];
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

/// `u(t_n) = ½ N(t_n)⁻¹ D(t_n)* k(t_n)`.
pub fn control_from_adjoint(sys: &BlqSystem, k: &Trajectory) -> ControlField {
    let (n, m) = (sys.spec.n, sys.spec.m);
    let mut u = ControlField::zeros(m, k.n_paths, k.n_steps);
    for step in 0..k.n_steps {
        let gain = &sys.steps[step].gain;
        for p in 0..k.n_paths {
            mat_vec_acc(gain, m, n, k.get(step, p), u.get_mut(step, p));
        }
    }
    u
}

/// `⟨J′(u), v⟩ = 2E⟨My(0),Y(0)⟩ + 2E Σ dt [⟨Ey,Y⟩ + Σ⟨F^i q^i,Q^i⟩ + Σ⟨G^i z^i,Z^i⟩ + ⟨Nu,v⟩]`
/// where `(Y, Q, Z)` solves the state equation with control `v` and zero
/// terminal value.
pub fn frechet_gradient(
    sys: &BlqSystem,
    solver: &BsdeSolver<'_>,
    state: &BsdeSolution,
    u: &ControlField,
    v: &ControlField,
) -> Result<Estimate> {
    let zero = TerminalValues::zeros(sys.spec.n, solver.bundle().n_paths());
    let var = solve_state(sys, solver, &zero, v)?;
    Ok(frechet_pairing(sys, state, &var, u, v))
}

/// Pairing `<J'(u), v>` given the variation `var`, the state solution driven by
/// `v` with zero terminal value.
pub fn frechet_pairing(
    sys: &BlqSystem,
    state: &BsdeSolution,
    var: &BsdeSolution,
    u: &ControlField,
    v: &ControlField,
) -> Estimate {
    let shape = sys.shape();
    let running = sys.running_cost();
    let mut phi_y = vec![0.0; shape.n];
    sys.initial_cost().gradient(state.y0(), &mut phi_y);
    let head: f64 = phi_y.iter().zip(var.y0()).map(|(a, b)| a * b).sum();
    let mut g = CostGradient::new(shape);
    let samples: Vec<f64> = (0..state.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for n in 0..state.n_steps {
                let ctx = StepContext {
                    path: p,
                    step: n,
                    t: n as f64 * state.dt,
                };
                let at = Point {
                    y: state.y(n, p),
                    q: state.q(n, p),
                    z: state.z(n, p),
                    u: u.get(n, p),
                };
                running.gradient(&ctx, &at, &mut g);
                acc += g.pair(&Point {
                    y: var.y(n, p),
                    q: var.q(n, p),
                    z: var.z(n, p),
                    u: v.get(n, p),
                });
            }
            head + acc * state.dt
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// Central-difference check of the Fréchet derivative at one control.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub pairings: Vec<Estimate>,
    pub central_differences: Vec<f64>,
}

impl GradientCheck {
    /// Worst `|pairing − difference| / (|pairing| + 1e-8)`.
    pub fn worst_relative_error(&self) -> f64 {
        self.pairings
            .iter()
            .zip(&self.central_differences)
            .map(|(p, fd)| (p.value - fd).abs() / (p.value.abs() + 1e-8))
            .fold(0.0, f64::max)
    }

    /// Worst `|pairing| / SE`; small at a stationary control.
    pub fn worst_pairing_z(&self) -> f64 {
        self.pairings
            .iter()
            .map(|p| p.z_score(0.0))
            .fold(0.0, f64::max)
    }

    pub fn worst_pairing(&self) -> f64 {
        self.pairings.iter().map(|p| p.value.abs()).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["direction", "pairing", "pairing_se", "central_difference"]);
        for (i, (p, fd)) in self
            .pairings
            .iter()
            .zip(&self.central_differences)
            .enumerate()
        {
            t.push(vec![
                Cell::from(i),
                Cell::from(p.value),
                Cell::from(p.std_err),
                Cell::from(*fd),
            ]);
        }
        t
    }
}

/// The state equation is affine in the control, so the state at `u ± εv` is
/// the state at `u` plus `±ε` times the variation driven by `v`. Both sides of
/// every difference therefore use the same paths.
pub fn gradient_check(
    sys: &BlqSystem,
    solver: &BsdeSolver<'_>,
    xi: &TerminalValues,
    u: &ControlField,
    directions: &[ControlField],
    eps: f64,
) -> Result<GradientCheck> {
    let problem = sys.control_problem();
    let state = solve_state(sys, solver, xi, u)?;
    let zero = TerminalValues::zeros(sys.spec.n, solver.bundle().n_paths());
    let mut pairings = Vec::with_capacity(directions.len());
    let mut central_differences = Vec::with_capacity(directions.len());
    for v in directions {
        let var = solve_state(sys, solver, &zero, v)?;
        pairings.push(frechet_pairing(sys, &state, &var, u, v));
        let cost = |e: f64| {
            mean(&cost_samples_of(
                &problem,
                &state.combine(1.0, &var, e),
                &u.combine(1.0, v, e),
            ))
        };
        central_differences.push((cost(eps) - cost(-eps)) / (2.0 * eps));
    }
    Ok(GradientCheck {
        pairings,
        central_differences,
    })
}

/// Cost differences `J(u + εv) − J(u)` along random lines through a control.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCheck {
    pub base: Estimate,
    /// `(direction, ε, J(u + εv) − J(u))` with common random numbers.
    pub differences: Vec<(usize, f64, Estimate)>,
    /// Fitted second-order coefficient of `ε ↦ J(u + εv)` per direction.
    pub curvatures: Vec<f64>,
}

impl ComparisonCheck {
    /// Smallest `(difference + 3 SE) / SE`; negative means some perturbation
    /// beats the control by more than three standard errors.
    pub fn min_margin(&self) -> f64 {
        self.differences
            .iter()
            .map(|(_, _, d)| (d.value + 3.0 * d.std_err) / d.std_err.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_curvature(&self) -> f64 {
        self.curvatures
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new([
            "direction",
            "epsilon",
            "cost_difference",
            "std_err",
            "curvature",
        ]);
        for (i, e, d) in &self.differences {
            t.push(vec![
                Cell::from(*i),
                Cell::from(*e),
                Cell::from(d.value),
                Cell::from(d.std_err),
                Cell::from(self.curvatures[*i]),
            ]);
        }
        t
    }
}

/// Perturbs `sol.u` by `±ε v` for every `ε` in `epsilons` and every direction.
pub fn comparison_check(
    sys: &BlqSystem,
    solver: &BsdeSolver<'_>,
    sol: &HamiltonSolution,
    directions: &[ControlField],
    epsilons: &[f64],
) -> Result<ComparisonCheck> {
    let problem = sys.control_problem();
    let base = cost_samples_of(&problem, &sol.state, &sol.u);
    let zero = TerminalValues::zeros(sys.spec.n, solver.bundle().n_paths());
    let mut differences = Vec::new();
    let mut curvatures = Vec::with_capacity(directions.len());
    for (i, v) in directions.iter().enumerate() {
        let var = solve_state(sys, solver, &zero, v)?;
        let (mut xs, mut ys) = (vec![0.0], vec![mean(&base)]);
        for &eps in epsilons {
            for e in [-eps, eps] {
                let samples = cost_samples_of(
                    &problem,
                    &sol.state.combine(1.0, &var, e),
                    &sol.u.combine(1.0, v, e),
                );
                let diff: Vec<f64> = samples.iter().zip(&base).map(|(a, b)| a - b).collect();
                differences.push((i, e, Estimate::from_samples(&diff)));
                xs.push(e);
                ys.push(mean(&samples));
            }
        }
        curvatures.push(fit_quadratic(&xs, &ys).map_or(f64::NAN, |c| c[2]));
    }
    Ok(ComparisonCheck {
        base: Estimate::from_samples(&base),
        differences,
        curvatures,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardParams {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-6,
            max_iters: 200,
        }
    }
}

/// Solution of the Hamilton system on one bundle.
#[derive(Debug, Clone)]
pub struct HamiltonSolution {
    pub u: ControlField,
    pub state: BsdeSolution,
    pub k: Trajectory,
    /// `‖u^{m+1} − u^m‖` per iteration.
    pub residuals: Vec<f64>,
    pub cost: Estimate,
    /// `sqrt(E Σ dt |2Nu − D*k|²)`.
    pub gradient_norm: f64,
    /// `sup |2Nu − D*k| / (1 + |k|)` over paths and steps.
    pub stationarity: f64,
    pub norms: HamiltonNorms,
}

impl HamiltonSolution {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    /// Residuals never increase after the first iteration.
    pub fn residuals_monotone(&self) -> bool {
        self.residuals.windows(2).skip(1).all(|w| w[1] <= w[0])
    }

    /// Cross-path mean of `u` at each step.
    pub fn mean_control(&self) -> Vec<f64> {
        let m = self.u.dim();
        let mut out = vec![0.0; m * self.u.n_steps()];
        for n in 0..self.u.n_steps() {
            for p in 0..self.u.n_paths() {
                for (o, v) in out[n * m..][..m].iter_mut().zip(self.u.get(n, p)) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= self.u.n_paths() as f64);
        out
    }

    /// Compares `other`, solved with terminal value scaled by `s`, against the
    /// exact homogeneity of the Hamilton system: processes scale by `s`, the
    /// cost and the a priori norms by `s²`. Solve `other` with the Picard
    /// tolerance scaled by `|s|` so that both runs stop after the same iteration.
    pub fn homogeneity(&self, other: &HamiltonSolution, s: f64) -> Homogeneity {
        let processes = [
            self.state.scaling_error(&other.state, s),
            scaling_error(self.k.as_slice(), other.k.as_slice(), s),
            scaling_error(self.u.as_slice(), other.u.as_slice(), s),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let cost = scaling_error(&[self.cost.value], &[other.cost.value], s * s);
        let norms = scaling_error(&self.norms.values(), &other.norms.values(), s * s);
        Homogeneity {
            processes,
            cost,
            norms,
        }
    }

    /// `(path, step, t, u…, y…, k…)` for the first `max_paths` paths.
    pub fn to_table(&self, max_paths: usize) -> Table {
        let (m, n) = (self.u.dim(), self.state.shape.n);
        let mut cols = vec!["path".to_string(), "step".into(), "t".into()];
        cols.extend((1..=m).map(|i| format!("u_{i}")));
        cols.extend((1..=n).map(|i| format!("y_{i}")));
        cols.extend((1..=n).map(|i| format!("k_{i}")));
        let mut t = Table::new(cols);
        for p in 0..self.state.n_paths.min(max_paths) {
            for s in 0..=self.state.n_steps {
                let mut row = vec![
                    Cell::from(p),
                    Cell::from(s),
                    Cell::Real(s as f64 * self.state.dt),
                ];
                if s < self.state.n_steps {
                    row.extend(self.u.get(s, p).iter().map(|&v| Cell::Real(v)));
                } else {
                    row.extend((0..m).map(|_| Cell::Text(String::new())));
                }
                row.extend(self.state.y(s, p).iter().map(|&v| Cell::Real(v)));
                row.extend(self.k.get(s, p).iter().map(|&v| Cell::Real(v)));
                t.push(row);
            }
        }
        t
    }
}

/// Relative deviations from exact scaling, see [`HamiltonSolution::homogeneity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homogeneity {
    pub processes: f64,
    pub cost: f64,
    pub norms: f64,
}

impl Homogeneity {
    pub fn worst(&self) -> f64 {
        self.processes.max(self.cost).max(self.norms)
    }
}

/// Damped Picard iteration on the Hamilton system starting from `u ≡ 0`.
/// After convergence the state and adjoint are recomputed under the final
/// control so that all reported quantities belong to one admissible pair.
pub fn solve_hamilton(
    sys: &BlqSystem,
    solver: &BsdeSolver<'_>,
    xi: &TerminalValues,
    params: &PicardParams,
) -> Result<HamiltonSolution> {
    if !(params.damping > 0.0 && params.damping <= 1.0) {
        return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
    }
    let bundle = solver.bundle();
    let dt = bundle.grid().dt();
    let mut u = ControlField::zeros(sys.spec.m, bundle.n_paths(), bundle.n_steps());
    let mut residuals = Vec::new();
    loop {
        if residuals.len() >= params.max_iters {
            return Err(Error::NoConvergence { residuals });
        }
        let state = solve_state(sys, solver, xi, &u)?;
        let k = solve_adjoint(sys, &state, bundle)?;
        let target = control_from_adjoint(sys, &k);
        let next = u.combine(1.0 - params.damping, &target, params.damping);
        let res = next.combine(1.0, &u, -1.0).norm(dt);
        log::debug!(
            "picard iteration {}: residual {res:.3e}",
            residuals.len() + 1
        );
        residuals.push(res);
        u = next;
        if !res.is_finite() {
            return Err(Error::NoConvergence { residuals });
        }
        if res < params.tol {
            break;
        }
    }
    let state = solve_state(sys, solver, xi, &u)?;
    let k = solve_adjoint(sys, &state, bundle)?;
    let cost = blq_cost(sys, &state, &u);
    let (gradient_norm, stationarity) = stationarity_measures(sys, &u, &k);
    let norms = norm_estimates(&state, &k, xi);
    Ok(HamiltonSolution {
        u,
        state,
        k,
        residuals,
        cost,
        gradient_norm,
        stationarity,
        norms,
    })
}

fn stationarity_measures(sys: &BlqSystem, u: &ControlField, k: &Trajectory) -> (f64, f64) {
    let m = sys.spec.m;
    let mut hu = vec![0.0; m];
    let (mut sq, mut sup): (f64, f64) = (0.0, 0.0);
    for n in 0..u.n_steps() {
        for p in 0..u.n_paths() {
            let kv = k.get(n, p);
            sys.hamiltonian_u(n, u.get(n, p), kv, &mut hu);
            let h2: f64 = hu.iter().map(|v| v * v).sum();
            let knorm: f64 = kv.iter().map(|v| v * v).sum::<f64>().sqrt();
            sq += h2;
            sup = sup.max(h2.sqrt() / (1.0 + knorm));
        }
    }
    ((sq * sys.grid.dt() / u.n_paths() as f64).sqrt(), sup)
}

/// Second-moment norms of the Hamilton solution against `Ê|ξ|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonNorms {
    pub k_sup: Estimate,
    pub y_sup: Estimate,
    pub q_int: Estimate,
    pub z_int: Estimate,
    pub xi_sq: Estimate,
}

impl HamiltonNorms {
    pub fn values(&self) -> [f64; 4] {
        [
            self.k_sup.value,
            self.y_sup.value,
            self.q_int.value,
            self.z_int.value,
        ]
    }

    /// Each norm divided by `Ê|ξ|²`; `NaN` when `ξ = 0`.
    pub fn ratios(&self) -> [f64; 4] {
        self.values().map(|v| v / self.xi_sq.value)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["norm", "value", "std_err", "ratio_to_xi_sq"]);
        let named = [
            ("k_sup", self.k_sup),
            ("y_sup", self.y_sup),
            ("q_int", self.q_int),
            ("z_int", self.z_int),
        ];
        for (name, e) in named {
            t.push(vec![
                Cell::from(name),
                Cell::Real(e.value),
                Cell::Real(e.std_err),
                Cell::Real(e.value / self.xi_sq.value),
            ]);
        }
        t
    }
}

fn norm_estimates(state: &BsdeSolution, k: &Trajectory, xi: &TerminalValues) -> HamiltonNorms {
    let triple = a_priori_norms(state);
    HamiltonNorms {
        k_sup: k.sup_norm_sq(),
        y_sup: triple.y_sup,
        q_int: triple.q_int,
        z_int: triple.z_int,
        xi_sq: xi.mean_square(),
    }
}

pub fn hamilton_norm_report(solution: &HamiltonSolution) -> HamiltonNorms {
    solution.norms
}
