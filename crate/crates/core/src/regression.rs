//! Least-squares conditional expectations on a polynomial basis of the
//! Markov state `(W(t_n), H(t_n))`.
//!
//! `L(t_n)` is left out of the state: at a fixed grid time it is an affine
//! function of `H¹(t_n)`, so including it would only duplicate a column.
//! Features are centred and scaled per step, the intercept is unpenalized,
//! and columns that are constant across paths (all of them at `t_0`) are
//! dropped. A projection therefore reproduces the sample mean of its
//! regressand exactly.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::path_engine::PathBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    /// Maximum total degree of the monomials.
    pub degree: usize,
    /// Ridge added to the standardized normal matrix.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-10,
        }
    }
}

impl RegressionBasis {
    /// Monomials of total degree `1..=degree` in `dim` variables, each given
    /// as the list of variable indices it multiplies.
    pub fn monomials(&self, dim: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn rec(
            start: usize,
            dim: usize,
            left: usize,
            cur: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            for v in start..dim {
                cur.push(v);
                out.push(cur.clone());
                if left > 1 {
                    rec(v, dim, left - 1, cur, out);
                }
                cur.pop();
            }
        }
        if self.degree > 0 {
            rec(0, dim, self.degree, &mut current, &mut out);
        }
        out.sort_by_key(|m| m.len());
        out
    }
}

#[derive(Debug, Clone)]
struct StepFit {
    active: Vec<usize>,
    mean: Vec<f64>,
    inv_scale: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    condition: f64,
}

/// Per-step regression factors for one bundle, reusable across solves.
#[derive(Debug, Clone)]
pub struct Regressor {
    n_paths: usize,
    n_steps: usize,
    state_dim: usize,
    monomials: Vec<Vec<usize>>,
    states: Vec<f64>,
    fits: Vec<StepFit>,
    /// Standardized active features, step-major; step `n` starts at `offsets[n]`.
    features: Vec<f64>,
    offsets: Vec<usize>,
}

impl Regressor {
    pub fn new(bundle: &PathBundle, basis: &RegressionBasis) -> Result<Self> {
        if !(basis.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be non-negative".into()));
        }
        let n_paths = bundle.n_paths();
        let n_steps = bundle.n_steps();
        let d = bundle.brownian_dim();
        let k = bundle.level();
        let state_dim = d + k;
        let monomials = basis.monomials(state_dim);

        let mut states = vec![0.0; n_steps * n_paths * state_dim];
        for n in 1..n_steps {
            let (done, rest) = states.split_at_mut(n * n_paths * state_dim);
            let prev = &done[(n - 1) * n_paths * state_dim..];
            let cur = &mut rest[..n_paths * state_dim];
            for p in 0..n_paths {
                let (src, dst) = (
                    &prev[p * state_dim..][..state_dim],
                    &mut cur[p * state_dim..][..state_dim],
                );
                for (i, (a, b)) in dst.iter_mut().zip(bundle.dw(p, n - 1)).enumerate() {
                    *a = src[i] + b;
                }
                for (i, (a, b)) in dst[d..].iter_mut().zip(bundle.dh(p, n - 1)).enumerate() {
                    *a = src[d + i] + b;
                }
            }
        }

        let mut this = Self {
            n_paths,
            n_steps,
            state_dim,
            monomials,
            states,
            fits: Vec::with_capacity(n_steps),
            features: Vec::new(),
            offsets: Vec::with_capacity(n_steps),
        };
        let b = this.monomials.len();
        let mut raw = vec![0.0; b];
        for n in 0..n_steps {
            let fit = this.fit_step(n, basis.ridge)?;
            let a = fit.active.len();
            this.offsets.push(this.features.len());
            let mut z = vec![0.0; a];
            for p in 0..n_paths {
                this.standardized(&fit, n, p, &mut raw, &mut z);
                this.features.extend_from_slice(&z);
            }
            this.fits.push(fit);
        }
        Ok(this)
    }

    fn raw_features(&self, step: usize, path: usize, out: &mut [f64]) {
        let s = self.state(step, path);
        for (o, m) in out.iter_mut().zip(&self.monomials) {
            *o = m.iter().map(|&v| s[v]).product();
        }
    }

    fn fit_step(&self, step: usize, ridge: f64) -> Result<StepFit> {
        let b = self.monomials.len();
        let p_count = self.n_paths as f64;
        let mut raw = vec![0.0; self.n_paths * b];
        for p in 0..self.n_paths {
            self.raw_features(step, p, &mut raw[p * b..(p + 1) * b]);
        }
        let mut mean = vec![0.0; b];
        for row in raw.chunks(b) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= p_count);
        let mut var = vec![0.0; b];
        for row in raw.chunks(b) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let active: Vec<usize> = (0..b)
            .filter(|&j| {
                let sd = (var[j] / p_count).sqrt();
                sd > 1e-12 * mean[j].abs().max(1.0)
            })
            .collect();
        let inv_scale: Vec<f64> = active
            .iter()
            .map(|&j| (var[j] / p_count).sqrt().recip())
            .collect();
        let mean: Vec<f64> = active.iter().map(|&j| mean[j]).collect();
        let a = active.len();
        if a == 0 {
            return Ok(StepFit {
                active,
                mean,
                inv_scale,
                chol: None,
                condition: 1.0,
            });
        }
        let mut gram = DMatrix::<f64>::zeros(a, a);
        let mut z = vec![0.0; a];
        for row in raw.chunks(b) {
            for (i, &j) in active.iter().enumerate() {
                z[i] = (row[j] - mean[i]) * inv_scale[i];
            }
            for i in 0..a {
                for j in 0..=i {
                    gram[(i, j)] += z[i] * z[j];
                }
            }
        }
        for i in 0..a {
            for j in 0..i {
                gram[(j, i)] = gram[(i, j)];
            }
        }
        gram /= p_count;
        for i in 0..a {
            gram[(i, i)] += ridge;
        }
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let chol = Cholesky::new(gram).ok_or(Error::RegressionSingular { step })?;
        if !condition.is_finite() || condition > 1e15 {
            return Err(Error::RegressionSingular { step });
        }
        Ok(StepFit {
            active,
            mean,
            inv_scale,
            chol: Some(chol),
            condition,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Length of the state vector `(W, H)`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `(W(t_step), H(t_step))` of one path, for `step < n_steps`.
    #[inline]
    pub fn state(&self, step: usize, path: usize) -> &[f64] {
        &self.states[(step * self.n_paths + path) * self.state_dim..][..self.state_dim]
    }

    pub fn condition_numbers(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.condition).collect()
    }

    /// Projects `width` regressands (laid out `values[path * width + j]`) on
    /// the basis at `step` and writes the fitted values into `out`.
    pub fn project(&self, step: usize, values: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.n_paths * width);
        debug_assert_eq!(out.len(), self.n_paths * width);
        let fit = &self.fits[step];
        let p_count = self.n_paths as f64;
        let mut mean_r = vec![0.0; width];
        for row in values.chunks(width) {
            for (m, v) in mean_r.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean_r.iter_mut().for_each(|m| *m /= p_count);

        let chol = match &fit.chol {
            Some(c) => c,
            None => {
                for row in out.chunks_mut(width) {
                    row.copy_from_slice(&mean_r);
                }
                return;
            }
        };
        let a = fit.active.len();
        let feats = &self.features[self.offsets[step]..][..a * self.n_paths];
        let mut rhs = vec![0.0; a * width];
        for (row, z) in values.chunks(width).zip(feats.chunks(a)) {
            for j in 0..width {
                let r = row[j] - mean_r[j];
                for i in 0..a {
                    rhs[i * width + j] += z[i] * r;
                }
            }
        }
        let rhs = DMatrix::from_row_slice(a, width, &rhs) / p_count;
        let beta = chol.solve(&rhs);
        let beta_rows: Vec<f64> = beta.transpose().as_slice().to_vec();
        for (row, z) in out.chunks_mut(width).zip(feats.chunks(a)) {
            row.copy_from_slice(&mean_r);
            for i in 0..a {
                let zi = z[i];
                for j in 0..width {
                    row[j] += zi * beta_rows[i * width + j];
                }
            }
        }
    }

    #[inline]
    fn standardized(
        &self,
        fit: &StepFit,
        step: usize,
        path: usize,
        raw: &mut [f64],
        z: &mut [f64],
    ) {
        self.raw_features(step, path, raw);
        for (i, &j) in fit.active.iter().enumerate() {
            z[i] = (raw[j] - fit.mean[i]) * fit.inv_scale[i];
        }
    }
}
