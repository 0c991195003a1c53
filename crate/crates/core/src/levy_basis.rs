//! Lévy model description and the orthonormal polynomial basis that turns
//! compensated power-jump processes into Teugel martingales.
//!
//! The driving process is parametrized directly as
//! `L(t) = drift·t + sigma·B(t) + Σ jumps`, with a finite jump measure made of
//! point masses. The orthonormalization measure is
//! `μ(dx) = x²ν(dx) + σ²δ₀(dx)` and its moments are exact finite sums.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::table::{Cell, Table};

/// Maximum tolerated deviation of `c G cᵀ` from the identity.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;
/// Relative pivot threshold below which the Gram matrix is declared rank deficient.
pub const PIVOT_REL_TOL: f64 = 1e-12;

/// A jump of size `location` arriving at rate `intensity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub location: f64,
    pub intensity: f64,
}

impl Atom {
    pub fn new(location: f64, intensity: f64) -> Self {
        Self {
            location,
            intensity,
        }
    }
}

/// Finite-support Lévy measure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpMeasure {
    atoms: Vec<Atom>,
}

impl JumpMeasure {
    pub fn new(atoms: Vec<Atom>) -> Self {
        Self { atoms }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Drops atoms with exactly zero intensity.
    pub fn without_null_atoms(mut self) -> Self {
        self.atoms.retain(|a| a.intensity != 0.0);
        self
    }

    /// Total jump rate `Λ = Σ λ_j`.
    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.intensity).sum()
    }

    /// `∫ x^power ν(dx)`.
    pub fn power_moment(&self, power: u32) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.intensity * a.location.powi(power as i32))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    pub drift: f64,
    pub sigma: f64,
    pub jumps: JumpMeasure,
    /// Dimension of the Brownian motion that is independent of `L`.
    pub brownian_dim: usize,
}

impl LevyModel {
    pub fn new(drift: f64, sigma: f64, jumps: JumpMeasure, brownian_dim: usize) -> Self {
        Self {
            drift,
            sigma,
            jumps,
            brownian_dim,
        }
    }

    /// `σ = 1` with symmetric unit jumps at rate 1/2 each, one Brownian motion.
    pub fn reference() -> Self {
        Self::new(
            0.0,
            1.0,
            JumpMeasure::new(vec![Atom::new(1.0, 0.5), Atom::new(-1.0, 0.5)]),
            1,
        )
    }

    pub fn validate(self) -> Result<Self> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidModel(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if !self.drift.is_finite() {
            return Err(Error::InvalidModel("drift must be finite".into()));
        }
        if self.brownian_dim == 0 {
            return Err(Error::InvalidModel(
                "brownian dimension must be positive".into(),
            ));
        }
        let atoms = self.jumps.atoms();
        for (i, a) in atoms.iter().enumerate() {
            if a.location == 0.0 {
                return Err(Error::InvalidModel(format!("atom at zero (atom {i})")));
            }
            if !a.location.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "atom {i} has a non-finite location"
                )));
            }
            if !(a.intensity > 0.0) || !a.intensity.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "atom {i} has non-positive intensity {}",
                    a.intensity
                )));
            }
            if atoms[..i].iter().any(|b| b.location == a.location) {
                return Err(Error::InvalidModel(format!(
                    "duplicate atom location {}",
                    a.location
                )));
            }
        }
        if self.sigma == 0.0 && atoms.is_empty() {
            return Err(Error::InvalidModel(
                "deterministic process: sigma is zero and the jump measure is empty".into(),
            ));
        }
        Ok(self)
    }

    /// `μ_k = Σ_j λ_j x_j^{k+2} + σ²·1{k=0}`.
    pub fn mu_moment(&self, k: usize) -> f64 {
        let jumps = self.jumps.power_moment(k as u32 + 2);
        if k == 0 {
            jumps + self.sigma * self.sigma
        } else {
            jumps
        }
    }

    /// Gram matrix of `1, x, …, x^{level-1}` in `L²(μ)`.
    pub fn gram_matrix(&self, level: usize) -> DMatrix<f64> {
        let moments: Vec<f64> = (0..2 * level.max(1) - 1)
            .map(|k| self.mu_moment(k))
            .collect();
        DMatrix::from_fn(level, level, |i, j| moments[i + j])
    }

    /// Rate of the compensator of the power-jump process of order `power`:
    /// `E L^{(1)}(t) = (drift + Σλx)·t` and `E L^{(j)}(t) = (Σλx^j)·t` for `j ≥ 2`.
    pub fn compensator_rate(&self, power: usize) -> f64 {
        let jump_part = self.jumps.power_moment(power as u32);
        if power == 1 {
            self.drift + jump_part
        } else {
            jump_part
        }
    }

    pub fn teugel_coeffs(&self, level: usize) -> Result<TeugelCoeffs> {
        orthonormalize(&self.gram_matrix(level), level)
    }
}

/// Lower-triangular `c` with `H^i = Σ_{j≤i} c_{ij} Y^{(j)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeugelCoeffs {
    c: DMatrix<f64>,
}

impl TeugelCoeffs {
    pub fn from_matrix(c: DMatrix<f64>) -> Result<Self> {
        if !c.is_square() || c.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "coefficient matrix must be square and non-empty".into(),
            ));
        }
        for i in 0..c.nrows() {
            for j in i + 1..c.ncols() {
                if c[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "coefficient matrix must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(Self { c })
    }

    /// Truncation level `K`.
    pub fn level(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// `dh = c · dy`.
    #[inline]
    pub fn apply(&self, dy: &[f64], dh: &mut [f64]) {
        let k = self.level();
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.c[(i, j)] * dy[j];
            }
            dh[i] = acc;
        }
    }

    /// Value at `x` of the `i`-th orthonormal polynomial `Σ_j c_{ij} x^j`.
    pub fn polynomial(&self, i: usize, x: f64) -> f64 {
        (0..=i).rev().fold(0.0, |acc, j| acc * x + self.c[(i, j)])
    }

    /// `max |c G cᵀ − I|`.
    pub fn orthonormality_residual(&self, gram: &DMatrix<f64>) -> f64 {
        let prod = &self.c * gram * self.c.transpose();
        let id = DMatrix::<f64>::identity(self.level(), self.level());
        (prod - id).amax()
    }

    pub fn to_table(&self) -> Table {
        let k = self.level();
        let mut t = Table::new((1..=k).map(|j| format!("c_{j}")));
        for i in 0..k {
            t.push((0..k).map(|j| Cell::Real(self.c[(i, j)])).collect());
        }
        t
    }
}

/// Orthonormalizes `1, x, …, x^{level-1}` against the Gram matrix by a
/// Cholesky factorization `G = L Lᵀ` and returns `c = L⁻¹`.
pub fn orthonormalize(gram: &DMatrix<f64>, level: usize) -> Result<TeugelCoeffs> {
    if level == 0 {
        return Err(Error::InvalidArgument(
            "truncation level must be positive".into(),
        ));
    }
    if gram.nrows() < level || gram.ncols() < level {
        return Err(Error::InvalidArgument(format!(
            "gram matrix is {}x{}, level {level} requested",
            gram.nrows(),
            gram.ncols()
        )));
    }
    let max_diag = (0..level).map(|i| gram[(i, i)].abs()).fold(0.0, f64::max);
    let threshold = PIVOT_REL_TOL * max_diag;

    let mut l = DMatrix::<f64>::zeros(level, level);
    for j in 0..level {
        let mut pivot = gram[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > threshold) {
            return Err(Error::RankDeficient {
                index: j + 1,
                pivot,
                threshold,
            });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..level {
            let mut s = gram[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }

    // forward substitution for L⁻¹, column by column
    let mut c = DMatrix::<f64>::zeros(level, level);
    for col in 0..level {
        for i in col..level {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * c[(k, col)];
            }
            c[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(TeugelCoeffs { c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian() -> LevyModel {
        LevyModel::new(0.0, 1.0, JumpMeasure::empty(), 1)
    }

    fn single_atom() -> LevyModel {
        LevyModel::new(0.0, 0.0, JumpMeasure::new(vec![Atom::new(1.0, 1.0)]), 1)
    }

    #[test]
    fn reference_model_is_accepted() {
        assert!(LevyModel::reference().validate().is_ok());
    }

    #[test]
    fn rejects_atom_at_zero() {
        let m = LevyModel::new(0.0, 1.0, JumpMeasure::new(vec![Atom::new(0.0, 1.0)]), 1);
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("atom at zero"), "{err}");
    }

    #[test]
    fn rejects_deterministic_process() {
        let m = LevyModel::new(0.3, 0.0, JumpMeasure::empty(), 1);
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("deterministic process"), "{err}");
    }

    #[test]
    fn rejects_bad_intensity_duplicates_and_negative_sigma() {
        let neg = LevyModel::new(0.0, 1.0, JumpMeasure::new(vec![Atom::new(1.0, -1.0)]), 1);
        assert!(neg.validate().is_err());
        let dup = LevyModel::new(
            0.0,
            1.0,
            JumpMeasure::new(vec![Atom::new(1.0, 1.0), Atom::new(1.0, 2.0)]),
            1,
        );
        assert!(dup
            .validate()
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        let sig = LevyModel::new(0.0, -1.0, JumpMeasure::empty(), 1);
        assert!(sig.validate().is_err());
    }

    #[test]
    fn null_atoms_are_pruned() {
        let nu =
            JumpMeasure::new(vec![Atom::new(1.0, 0.0), Atom::new(2.0, 1.0)]).without_null_atoms();
        assert_eq!(nu.atoms(), &[Atom::new(2.0, 1.0)]);
    }

    #[test]
    fn reference_moments() {
        let m = LevyModel::reference();
        assert_eq!(m.mu_moment(0), 2.0);
        assert_eq!(m.mu_moment(1), 0.0);
        assert_eq!(m.mu_moment(2), 1.0);
        assert_eq!(m.mu_moment(3), 0.0);
        assert_eq!(m.mu_moment(4), 1.0);
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian();
        assert_eq!(m.mu_moment(0), 1.0);
        for k in 1..6 {
            assert_eq!(m.mu_moment(k), 0.0);
        }
    }

    #[test]
    fn gram_matrices() {
        let g = LevyModel::reference().gram_matrix(3);
        let expected =
            DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g, expected);
        assert_eq!(gaussian().gram_matrix(1), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(
            single_atom().gram_matrix(2),
            DMatrix::from_element(2, 2, 1.0)
        );
    }

    #[test]
    fn reference_coefficients_match_hand_derivation() {
        let m = LevyModel::reference();
        let c = m.teugel_coeffs(3).unwrap();
        let s = std::f64::consts::SQRT_2;
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0 / s, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0 / s, 0.0, s]);
        assert!((c.matrix() - &expected).amax() < 1e-12);
        assert!(c.orthonormality_residual(&m.gram_matrix(3)) < ORTHONORMALITY_TOL);
    }

    #[test]
    fn gaussian_level_one_normalizes_constant() {
        let m = LevyModel::new(0.0, 2.0, JumpMeasure::empty(), 1);
        let c = m.teugel_coeffs(1).unwrap();
        assert!((c.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(gaussian().teugel_coeffs(2).is_err());
    }

    #[test]
    fn singular_gram_is_rank_deficient() {
        let err = single_atom().teugel_coeffs(2).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { index: 2, .. }));
        assert!(err.to_string().contains("rank deficient"));
        // μ for the reference model sits on three points, so only three
        // polynomials are independent.
        assert!(LevyModel::reference().teugel_coeffs(4).is_err());
    }

    #[test]
    fn triangular_structure() {
        let m = LevyModel::new(
            0.1,
            0.5,
            JumpMeasure::new(vec![
                Atom::new(0.8, 1.0),
                Atom::new(-0.5, 2.0),
                Atom::new(1.3, 0.4),
            ]),
            2,
        );
        let c = m.teugel_coeffs(4).unwrap();
        for i in 0..4 {
            assert!(c.matrix()[(i, i)] > 0.0);
            for j in i + 1..4 {
                assert_eq!(c.matrix()[(i, j)], 0.0);
            }
        }
    }

    fn atoms_strategy() -> impl Strategy<Value = LevyModel> {
        (
            0.0f64..1.5,
            proptest::collection::vec((0.2f64..1.5, any::<bool>(), 0.1f64..2.0), 3..6),
        )
            .prop_map(|(sigma, raw)| {
                let mut atoms: Vec<Atom> = Vec::new();
                for (loc, neg, lam) in raw {
                    let x = if neg { -loc } else { loc };
                    if atoms.iter().all(|a| (a.location - x).abs() > 0.1) {
                        atoms.push(Atom::new(x, lam));
                    }
                }
                LevyModel::new(0.0, sigma, JumpMeasure::new(atoms), 1)
            })
    }

    proptest! {
        #[test]
        fn orthonormal_within_tolerance(model in atoms_strategy()) {
            let support = model.jumps.atoms().len() + usize::from(model.sigma > 0.0);
            let level = support.min(3);
            let gram = model.gram_matrix(level);
            if let Ok(c) = orthonormalize(&gram, level) {
                prop_assert!(c.orthonormality_residual(&gram) < ORTHONORMALITY_TOL);
            }
        }

        #[test]
        fn moments_match_quadrature_over_atoms(model in atoms_strategy(), k in 0usize..5) {
            // integrate x^k against μ = x²ν + σ²δ₀ atom by atom
            let mut brute = if k == 0 { model.sigma * model.sigma } else { 0.0 };
            for a in model.jumps.atoms() {
                let mut xk = 1.0;
                for _ in 0..k { xk *= a.location; }
                brute += a.intensity * a.location * a.location * xk;
            }
            let got = model.mu_moment(k);
            prop_assert!((got - brute).abs() <= 1e-12 * (1.0 + brute.abs()));
        }

        #[test]
        fn scaling_maps_polynomials(model in atoms_strategy(), s in 0.5f64..2.0, x in -2.0f64..2.0) {
            let support = model.jumps.atoms().len() + usize::from(model.sigma > 0.0);
            let level = support.min(3);
            let scaled = LevyModel::new(
                model.drift,
                s * model.sigma,
                JumpMeasure::new(model.jumps.atoms().iter().map(|a| Atom::new(s * a.location, a.intensity)).collect()),
                1,
            );
            for k in 0..2 * level - 1 {
                let lhs = scaled.mu_moment(k);
                let rhs = s.powi(k as i32 + 2) * model.mu_moment(k);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
            if let (Ok(c), Ok(cs)) = (model.teugel_coeffs(level), scaled.teugel_coeffs(level)) {
                for i in 0..level {
                    let lhs = cs.polynomial(i, x);
                    let rhs = c.polynomial(i, x / s) / s;
                    prop_assert!((lhs - rhs).abs() <= 1e-7 * (1.0 + rhs.abs()), "i={} {} vs {}", i, lhs, rhs);
                }
            }
        }
    }
}
