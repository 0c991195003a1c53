//! Monte Carlo summaries.

use nalgebra::{DMatrix, DVector};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_err: 0.0,
        }
    }

    /// Sample mean and standard error of the mean. Sums run in slice order.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                value: f64::NAN,
                std_err: f64::NAN,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self {
                value: mean,
                std_err: 0.0,
            };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            value: mean,
            std_err: (var / n as f64).sqrt(),
        }
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = (self.value - target).abs();
        if self.std_err == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / self.std_err
        }
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Least-squares coefficients `[c0, c1, c2]` of `y ≈ c0 + c1 x + c2 x²`;
/// `None` with fewer than three distinct abscissae.
pub fn fit_quadratic(x: &[f64], y: &[f64]) -> Option<[f64; 3]> {
    let a = DMatrix::from_fn(x.len(), 3, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let c = (a.transpose() * &a).cholesky()?.solve(&(a.transpose() * b));
    Some([c[0], c[1], c[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((e.std_err - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        assert!((fit_slope(&x, &y) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_through_points() {
        let x = [-0.2, -0.1, 0.0, 0.1, 0.2];
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 0.1 * v + 3.0 * v * v).collect();
        let c = fit_quadratic(&x, &y).unwrap();
        assert!(
            (c[2] - 3.0).abs() < 1e-10 && (c[1] - 0.1).abs() < 1e-10 && (c[0] - 0.5).abs() < 1e-12
        );
        assert!(fit_quadratic(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_none());
    }
}
