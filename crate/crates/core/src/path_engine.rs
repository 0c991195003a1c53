//! Monte Carlo ensembles of the driving noises on a uniform grid.
//!
//! Each path draws from its own ChaCha8 stream: the key is expanded from the
//! user seed with `SeedableRng::seed_from_u64` and the stream id is the path
//! index. Within a step the draws are consumed in a fixed order: the `d`
//! Brownian normals, then the Gaussian part of `L` (when `σ > 0`), then the
//! Poisson jump count (when `Λ > 0`), then one atom index per jump. A path's
//! increments therefore depend only on `(seed, path)`, so parallel and
//! sequential simulation produce identical bundles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levy_basis::{LevyModel, TeugelCoeffs};
use crate::stats::Estimate;
use crate::table::{Cell, Table};

/// Default cap on stored increments (`n_paths × n_steps × (d + 2K)`).
pub const DEFAULT_MEMORY_BUDGET: usize = 160_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid time `t_n`; `t_N` is exactly the horizon.
    pub fn time(&self, step: usize) -> f64 {
        if step >= self.n_steps {
            self.horizon
        } else {
            step as f64 * self.dt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSpec {
    pub seed: u64,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Independent stream for one path.
    pub fn path_rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationOptions {
    /// Maximum number of stored increment values.
    pub memory_budget: usize,
    /// Keep the individual jump sizes of every step.
    pub record_jumps: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            memory_budget: DEFAULT_MEMORY_BUDGET,
            record_jumps: false,
        }
    }
}

/// Jump sizes per (path, step), stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpLog {
    offsets: Vec<usize>,
    sizes: Vec<f64>,
}

impl JumpLog {
    fn slot(&self, n_steps: usize, path: usize, step: usize) -> &[f64] {
        let i = path * n_steps + step;
        &self.sizes[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total_jumps(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }
}

/// State of the driving noise at a grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovState {
    pub t: f64,
    pub w: Vec<f64>,
    pub l: f64,
    pub h: Vec<f64>,
}

/// Simulated increments `ΔW`, `ΔY^{(j)}` and `ΔH^i`, stored step-major so
/// that a backward sweep over all paths at one step reads contiguous memory.
#[derive(Debug, Clone)]
pub struct PathBundle {
    model: LevyModel,
    coeffs: TeugelCoeffs,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    dw: Vec<f64>,
    dy: Vec<f64>,
    dh: Vec<f64>,
    jumps: Option<JumpLog>,
}

/// Paths simulated per work item before scattering into the bundle.
const BLOCK_PATHS: usize = 256;

struct Block {
    dw: Vec<f64>,
    dy: Vec<f64>,
    dh: Vec<f64>,
    counts: Vec<usize>,
    sizes: Vec<f64>,
}

pub fn simulate_paths(
    model: &LevyModel,
    coeffs: &TeugelCoeffs,
    grid: TimeGrid,
    n_paths: usize,
    rng: RngSpec,
    options: &SimulationOptions,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let model = model.clone().validate()?;
    let level = coeffs.level();
    let residual = coeffs.orthonormality_residual(&model.gram_matrix(level));
    if !(residual < 1e-8) {
        return Err(Error::InvalidArgument(format!(
            "coefficients were not derived from this model (orthonormality residual {residual:.3e})"
        )));
    }
    let d = model.brownian_dim;
    let n_steps = grid.n_steps();
    let requested = n_paths
        .checked_mul(n_steps)
        .and_then(|v| v.checked_mul(d + 2 * level))
        .unwrap_or(usize::MAX);
    if requested > options.memory_budget {
        return Err(Error::MemoryBudget {
            requested,
            budget: options.memory_budget,
        });
    }

    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let atoms = model.jumps.atoms().to_vec();
    let total_rate = model.jumps.total_intensity();
    let poisson = if total_rate > 0.0 {
        Some(Poisson::new(total_rate * dt).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let picker = if atoms.is_empty() {
        None
    } else {
        Some(
            WeightedIndex::new(atoms.iter().map(|a| a.intensity))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        )
    };
    let compensators: Vec<f64> = (1..=level)
        .map(|j| model.compensator_rate(j) * dt)
        .collect();

    let mut dw = vec![0.0; n_paths * n_steps * d];
    let mut dy = vec![0.0; n_paths * n_steps * level];
    let mut dh = vec![0.0; n_paths * n_steps * level];
    let record = options.record_jumps;

    // Paths are simulated in blocks into path-major scratch, then scattered
    // into the step-major arrays so each block lands contiguously per step.
    let simulate_block = |first: usize, count: usize| -> Block {
        let mut block = Block {
            dw: vec![0.0; count * n_steps * d],
            dy: vec![0.0; count * n_steps * level],
            dh: vec![0.0; count * n_steps * level],
            counts: Vec::new(),
            sizes: Vec::new(),
        };
        let mut power_sums = vec![0.0; level];
        for b in 0..count {
            let mut rng = rng.path_rng(first + b);
            for n in 0..n_steps {
                let i = b * n_steps + n;
                for w in &mut block.dw[i * d..(i + 1) * d] {
                    let xi: f64 = rng.sample(StandardNormal);
                    *w = sqrt_dt * xi;
                }
                let gauss = if model.sigma > 0.0 {
                    let xi: f64 = rng.sample(StandardNormal);
                    model.sigma * sqrt_dt * xi
                } else {
                    0.0
                };
                power_sums.iter_mut().for_each(|s| *s = 0.0);
                let count = poisson
                    .as_ref()
                    .map_or(0, |pois| pois.sample(&mut rng) as usize);
                for _ in 0..count {
                    let x = atoms[picker.as_ref().unwrap().sample(&mut rng)].location;
                    let mut xp = x;
                    for s in power_sums.iter_mut() {
                        *s += xp;
                        xp *= x;
                    }
                    if record {
                        block.sizes.push(x);
                    }
                }
                if record {
                    block.counts.push(count);
                }
                let dy_n = &mut block.dy[i * level..(i + 1) * level];
                let first = model.drift * dt + gauss + power_sums[0];
                dy_n[0] = first - compensators[0];
                for j in 1..level {
                    dy_n[j] = power_sums[j] - compensators[j];
                }
                coeffs.apply(dy_n, &mut block.dh[i * level..(i + 1) * level]);
            }
        }
        block
    };

    let n_blocks = n_paths.div_ceil(BLOCK_PATHS);
    let group = rayon::current_num_threads().max(1) * 4;
    let mut log_counts = Vec::new();
    let mut log_sizes = Vec::new();
    for g0 in (0..n_blocks).step_by(group) {
        let blocks: Vec<(usize, Block)> = (g0..(g0 + group).min(n_blocks))
            .into_par_iter()
            .map(|bi| {
                let first = bi * BLOCK_PATHS;
                let count = BLOCK_PATHS.min(n_paths - first);
                (first, simulate_block(first, count))
            })
            .collect();
        for (first, block) in blocks {
            let count = BLOCK_PATHS.min(n_paths - first);
            for n in 0..n_steps {
                for b in 0..count {
                    let src = b * n_steps + n;
                    let dst = n * n_paths + first + b;
                    dw[dst * d..(dst + 1) * d].copy_from_slice(&block.dw[src * d..(src + 1) * d]);
                    dy[dst * level..(dst + 1) * level]
                        .copy_from_slice(&block.dy[src * level..(src + 1) * level]);
                    dh[dst * level..(dst + 1) * level]
                        .copy_from_slice(&block.dh[src * level..(src + 1) * level]);
                }
            }
            log_counts.extend(block.counts);
            log_sizes.extend(block.sizes);
        }
    }

    let jumps = record.then(|| {
        let mut offsets = Vec::with_capacity(n_paths * n_steps + 1);
        offsets.push(0);
        for c in log_counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        JumpLog {
            offsets,
            sizes: log_sizes,
        }
    });

    Ok(PathBundle {
        model,
        coeffs: coeffs.clone(),
        grid,
        n_paths,
        seed: rng.seed,
        dw,
        dy,
        dh,
        jumps,
    })
}

impl PathBundle {
    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    pub fn coeffs(&self) -> &TeugelCoeffs {
        &self.coeffs
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn brownian_dim(&self) -> usize {
        self.model.brownian_dim
    }

    /// Truncation level `K`.
    pub fn level(&self) -> usize {
        self.coeffs.level()
    }

    pub fn jump_log(&self) -> Option<&JumpLog> {
        self.jumps.as_ref()
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        let d = self.brownian_dim();
        let i = (step * self.n_paths + path) * d;
        &self.dw[i..i + d]
    }

    #[inline]
    pub fn dy(&self, path: usize, step: usize) -> &[f64] {
        let k = self.level();
        let i = (step * self.n_paths + path) * k;
        &self.dy[i..i + k]
    }

    #[inline]
    pub fn dh(&self, path: usize, step: usize) -> &[f64] {
        let k = self.level();
        let i = (step * self.n_paths + path) * k;
        &self.dh[i..i + k]
    }

    pub fn jumps(&self, path: usize, step: usize) -> Option<&[f64]> {
        self.jumps
            .as_ref()
            .map(|log| log.slot(self.n_steps(), path, step))
    }

    /// `(W, L, H)` of one path at grid time `t_step`.
    pub fn state(&self, path: usize, step: usize) -> MarkovState {
        let d = self.brownian_dim();
        let k = self.level();
        let mut w = vec![0.0; d];
        let mut h = vec![0.0; k];
        let mut y1 = 0.0;
        for n in 0..step {
            for (a, b) in w.iter_mut().zip(self.dw(path, n)) {
                *a += b;
            }
            for (a, b) in h.iter_mut().zip(self.dh(path, n)) {
                *a += b;
            }
            y1 += self.dy(path, n)[0];
        }
        let t = self.grid.time(step);
        MarkovState {
            t,
            w,
            l: y1 + self.model.compensator_rate(1) * t,
            h,
        }
    }

    pub fn terminal_state(&self, path: usize) -> MarkovState {
        self.state(path, self.n_steps())
    }

    /// [`PathBundle::terminal_state`] for every path, accumulated step by step.
    pub fn terminal_states(&self) -> Vec<MarkovState> {
        let (d, k, p_count) = (self.brownian_dim(), self.level(), self.n_paths);
        let mut w = vec![0.0; p_count * d];
        let mut h = vec![0.0; p_count * k];
        let mut y1 = vec![0.0; p_count];
        for n in 0..self.n_steps() {
            for p in 0..p_count {
                for (a, b) in w[p * d..(p + 1) * d].iter_mut().zip(self.dw(p, n)) {
                    *a += b;
                }
                for (a, b) in h[p * k..(p + 1) * k].iter_mut().zip(self.dh(p, n)) {
                    *a += b;
                }
                y1[p] += self.dy(p, n)[0];
            }
        }
        let t = self.grid.horizon();
        let drift = self.model.compensator_rate(1) * t;
        (0..p_count)
            .map(|p| MarkovState {
                t,
                w: w[p * d..(p + 1) * d].to_vec(),
                l: y1[p] + drift,
                h: h[p * k..(p + 1) * k].to_vec(),
            })
            .collect()
    }

    /// Merges every `factor` consecutive steps into one. The coarse bundle
    /// carries exactly the same noise, so comparisons across resolutions use
    /// common random numbers.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle> {
        let n_steps = self.n_steps();
        if factor == 0 || n_steps % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {n_steps} steps by a factor of {factor}"
            )));
        }
        let coarse_steps = n_steps / factor;
        let grid = TimeGrid::new(self.grid.horizon(), coarse_steps)?;
        let merge = |src: &[f64], width: usize| -> Vec<f64> {
            let row = self.n_paths * width;
            let mut out = vec![0.0; coarse_steps * row];
            for c in 0..coarse_steps {
                let dst = &mut out[c * row..(c + 1) * row];
                for f in 0..factor {
                    let n = c * factor + f;
                    for (a, b) in dst.iter_mut().zip(&src[n * row..(n + 1) * row]) {
                        *a += b;
                    }
                }
            }
            out
        };
        let jumps = self.jumps.as_ref().map(|log| JumpLog {
            offsets: log.offsets.iter().step_by(factor).copied().collect(),
            sizes: log.sizes.clone(),
        });
        Ok(PathBundle {
            model: self.model.clone(),
            coeffs: self.coeffs.clone(),
            grid,
            n_paths: self.n_paths,
            seed: self.seed,
            dw: merge(&self.dw, self.brownian_dim()),
            dy: merge(&self.dy, self.level()),
            dh: merge(&self.dh, self.level()),
            jumps,
        })
    }

    /// CSV dump `(path, step, t, dW_1..dW_d, dH_1..dH_K)` of the first
    /// `max_paths` paths.
    pub fn to_table(&self, max_paths: usize) -> Table {
        let d = self.brownian_dim();
        let k = self.level();
        let mut cols = vec!["path".to_string(), "step".into(), "t".into()];
        cols.extend((1..=d).map(|i| format!("dW_{i}")));
        cols.extend((1..=k).map(|i| format!("dH_{i}")));
        let mut table = Table::new(cols);
        for p in 0..self.n_paths.min(max_paths) {
            for n in 0..self.n_steps() {
                let mut row = vec![Cell::from(p), Cell::from(n), Cell::Real(self.grid.time(n))];
                row.extend(self.dw(p, n).iter().map(|&v| Cell::Real(v)));
                row.extend(self.dh(p, n).iter().map(|&v| Cell::Real(v)));
                table.push(row);
            }
        }
        table
    }
}

/// Per-entry estimates and standard errors of a `K×K` bracket-type quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Bracket {
    pub estimate: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
}

impl Bracket {
    /// Largest `|estimate − δ_ij·t| / SE` over all entries.
    pub fn max_z_score(&self, t: f64) -> f64 {
        let k = self.estimate.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { t } else { 0.0 };
                let e = Estimate {
                    value: self.estimate[(i, j)],
                    std_err: self.std_err[(i, j)],
                };
                worst = worst.max(e.z_score(target));
            }
        }
        worst
    }

    pub fn to_table(&self, t: f64) -> Table {
        let mut table = Table::new(["i", "j", "estimate", "std_err", "target"]);
        let k = self.estimate.nrows();
        for i in 0..k {
            for j in 0..k {
                table.push(vec![
                    Cell::from(i + 1),
                    Cell::from(j + 1),
                    Cell::Real(self.estimate[(i, j)]),
                    Cell::Real(self.std_err[(i, j)]),
                    Cell::Real(if i == j { t } else { 0.0 }),
                ]);
            }
        }
        table
    }
}

/// Per-entry estimates from per-path samples laid out `samples[p·K² + i·K + j]`.
fn bracket_from(k: usize, samples: &[f64]) -> Bracket {
    let n_paths = samples.len() / (k * k);
    let mut estimate = DMatrix::zeros(k, k);
    let mut std_err = DMatrix::zeros(k, k);
    let mut column = vec![0.0; n_paths];
    for i in 0..k {
        for j in 0..k {
            for (p, c) in column.iter_mut().enumerate() {
                *c = samples[p * k * k + i * k + j];
            }
            let e = Estimate::from_samples(&column);
            estimate[(i, j)] = e.value;
            std_err[(i, j)] = e.std_err;
        }
    }
    Bracket { estimate, std_err }
}

/// Sample mean over paths of `Σ_n ΔH^i_n ΔH^j_n`.
pub fn empirical_bracket(bundle: &PathBundle) -> Bracket {
    let k = bundle.level();
    let mut acc = vec![0.0; bundle.n_paths() * k * k];
    for n in 0..bundle.n_steps() {
        acc.par_chunks_mut(k * k).enumerate().for_each(|(p, a)| {
            let dh = bundle.dh(p, n);
            for i in 0..k {
                for j in 0..k {
                    a[i * k + j] += dh[i] * dh[j];
                }
            }
        });
    }
    bracket_from(k, &acc)
}

/// Sample mean over paths of `H^i(T) H^j(T)`.
pub fn terminal_products(bundle: &PathBundle) -> Bracket {
    let k = bundle.level();
    let mut h = vec![0.0; bundle.n_paths() * k];
    for n in 0..bundle.n_steps() {
        h.par_chunks_mut(k).enumerate().for_each(|(p, hp)| {
            for (a, b) in hp.iter_mut().zip(bundle.dh(p, n)) {
                *a += b;
            }
        });
    }
    let samples: Vec<f64> = h
        .chunks(k)
        .flat_map(|hp| (0..k * k).map(move |ij| hp[ij / k] * hp[ij % k]))
        .collect();
    bracket_from(k, &samples)
}

/// One row of the power-jump QA table.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub order: usize,
    pub mean: Estimate,
    pub exact_mean: f64,
    pub variance: Estimate,
    pub exact_variance: f64,
}

/// Empirical jump rate of one atom against its intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomRow {
    pub location: f64,
    pub rate: Estimate,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub components: Vec<MomentRow>,
    pub atoms: Vec<AtomRow>,
}

impl MomentReport {
    /// Largest z-score over the mean and variance checks.
    pub fn max_z_score(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|r| {
                [
                    r.mean.z_score(r.exact_mean),
                    r.variance.z_score(r.exact_variance),
                ]
            })
            .chain(self.atoms.iter().map(|a| a.rate.z_score(a.intensity)))
            .fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["quantity", "order", "estimate", "std_err", "exact"]);
        for r in &self.components {
            t.push(vec![
                "mean_dY".into(),
                Cell::from(r.order),
                Cell::Real(r.mean.value),
                Cell::Real(r.mean.std_err),
                Cell::Real(r.exact_mean),
            ]);
            t.push(vec![
                "var_dY".into(),
                Cell::from(r.order),
                Cell::Real(r.variance.value),
                Cell::Real(r.variance.std_err),
                Cell::Real(r.exact_variance),
            ]);
        }
        for a in &self.atoms {
            t.push(vec![
                format!("rate@{}", a.location).into(),
                Cell::Int(0),
                Cell::Real(a.rate.value),
                Cell::Real(a.rate.std_err),
                Cell::Real(a.intensity),
            ]);
        }
        t
    }
}

/// Per-step mean and variance of each `ΔY^{(j)}` against the exact values
/// `0` and `μ_{2j-2}·dt`; with a jump log, also the per-atom jump rates.
pub fn power_jump_moments_report(model: &LevyModel, bundle: &PathBundle) -> MomentReport {
    let dt = bundle.grid().dt();
    let k = bundle.level();
    let count = bundle.n_paths() * bundle.n_steps();
    let mut components = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(count);
    for j in 0..k {
        values.clear();
        for p in 0..bundle.n_paths() {
            for n in 0..bundle.n_steps() {
                values.push(bundle.dy(p, n)[j]);
            }
        }
        let mean = Estimate::from_samples(&values);
        let centered: Vec<f64> = values.iter().map(|v| (v - mean.value).powi(2)).collect();
        let variance = Estimate::from_samples(&centered);
        components.push(MomentRow {
            order: j + 1,
            mean,
            exact_mean: 0.0,
            variance,
            exact_variance: model.mu_moment(2 * j) * dt,
        });
    }

    let mut atoms = Vec::new();
    if bundle.jump_log().is_some() {
        let horizon = bundle.grid().horizon();
        for atom in model.jumps.atoms() {
            let per_path: Vec<f64> = (0..bundle.n_paths())
                .map(|p| {
                    (0..bundle.n_steps())
                        .map(|n| {
                            bundle
                                .jumps(p, n)
                                .unwrap()
                                .iter()
                                .filter(|&&x| x == atom.location)
                                .count()
                        })
                        .sum::<usize>() as f64
                        / horizon
                })
                .collect();
            atoms.push(AtomRow {
                location: atom.location,
                rate: Estimate::from_samples(&per_path),
                intensity: atom.intensity,
            });
        }
    }
    MomentReport { components, atoms }
}
