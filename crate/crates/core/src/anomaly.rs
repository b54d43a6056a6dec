//! Mahalanobis distance over estimation residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Ridge added to the residual covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyModel {
    pub mu: Vec<f64>,
    /// Row-major regularized covariance.
    pub sigma: Vec<f64>,
    pub threshold: f64,
    /// Row-major lower Cholesky factor of `sigma`.
    chol: Vec<f64>,
}

impl AnomalyModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.sigma)
    }

    /// Mahalanobis distance of a residual.
    pub fn score(&self, e: &[f64]) -> Result<f64> {
        check_len("residual", self.dim(), e.len())?;
        let n = self.dim();
        let l = DMatrix::from_row_slice(n, n, &self.chol);
        let d = DVector::from_iterator(n, e.iter().zip(&self.mu).map(|(a, b)| a - b));
        let y = l
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::InvalidConfig("singular covariance factor".into()))?;
        Ok(y.norm())
    }

    pub fn is_anomalous(&self, d: f64) -> bool {
        d > self.threshold
    }
}

/// Fits mean, covariance and a `mean + 3 std` threshold over the
/// calibration distances.
pub fn calibrate(residuals: &[Vec<f64>]) -> Result<AnomalyModel> {
    let n = residuals
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Empty("residuals".into()))?;
    if n == 0 {
        return Err(Error::Empty("residual dimension".into()));
    }
    if residuals.len() < n + 2 {
        return Err(Error::TooFewSamples {
            need: n + 2,
            got: residuals.len(),
        });
    }
    for r in residuals {
        check_len("residual", n, r.len())?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "calibration residual".into(),
            });
        }
    }
    let k = residuals.len() as f64;
    let mut mu = vec![0.0; n];
    for r in residuals {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= k;
    }
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for r in residuals {
        let d = DVector::from_iterator(n, r.iter().zip(&mu).map(|(a, b)| a - b));
        sigma += &d * d.transpose() / k;
    }
    for i in 0..n {
        sigma[(i, i)] += COVARIANCE_RIDGE;
    }
    let chol = sigma.clone().cholesky().ok_or_else(|| {
        Error::InvalidConfig("residual covariance is not positive definite".into())
    })?;
    let l = chol.l();
    let mut model = AnomalyModel {
        mu,
        sigma: sigma.transpose().as_slice().to_vec(),
        threshold: 0.0,
        chol: l.transpose().as_slice().to_vec(),
    };
    let ds: Vec<f64> = residuals
        .iter()
        .map(|r| model.score(r))
        .collect::<Result<_>>()?;
    let mean = ds.iter().sum::<f64>() / k;
    let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / k;
    model.threshold = mean + 3.0 * var.sqrt();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn with_sigma(mu: Vec<f64>, sigma: &[f64]) -> AnomalyModel {
        let n = mu.len();
        let m = DMatrix::from_row_slice(n, n, sigma);
        let l = m.clone().cholesky().unwrap().l();
        AnomalyModel {
            mu,
            sigma: sigma.to_vec(),
            threshold: 1.0,
            chol: l.transpose().as_slice().to_vec(),
        }
    }

    #[test]
    fn hand_computed_distances() {
        let a = with_sigma(vec![0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        assert!((a.score(&[2.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.score(&[0.0, 0.0]).unwrap(), 0.0);
        let i = with_sigma(vec![0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((i.score(&[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-12);
        let b = with_sigma(vec![0.0, 0.0], &[1.0, 0.0, 0.0, 100.0]);
        assert!((b.score(&[0.0, 10.0]).unwrap() - b.score(&[1.0, 0.0]).unwrap()).abs() < 1e-12);
        assert!(b.score(&[1.0]).is_err());
    }

    #[test]
    fn threshold_boundary() {
        let a = with_sigma(vec![0.0], &[1.0]);
        assert!(!a.is_anomalous(1.0));
        assert!(a.is_anomalous(1.0 + 1e-12));
    }

    #[test]
    fn degenerate_residuals() {
        let r = vec![vec![0.5, -1.0]; 10];
        let a = calibrate(&r).unwrap();
        assert_eq!(a.threshold, 0.0);
        assert_eq!(a.sigma, vec![COVARIANCE_RIDGE, 0.0, 0.0, COVARIANCE_RIDGE]);
        assert!(calibrate(&r[..3]).is_err());
    }

    #[test]
    fn standard_normal_distances_follow_chi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<Vec<f64>> = (0..10000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let a = calibrate(&r).unwrap();
        let mean_d = r.iter().map(|e| a.score(e).unwrap()).sum::<f64>() / r.len() as f64;
        // chi mean with 3 dof: sqrt(2) * Gamma(2) / Gamma(1.5) = 2 sqrt(2 / pi)
        let chi = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_d - chi).abs() < 0.1 * chi, "{mean_d} vs {chi}");
        // brute-force numeric quantile of the chi distribution via its own samples
        let mut ds: Vec<f64> = r.iter().map(|e| a.score(e).unwrap()).collect();
        ds.sort_by(f64::total_cmp);
        let median = ds[ds.len() / 2];
        assert!((median - 1.538).abs() < 0.05, "{median}");
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 3.0, 0.2, 0.0, 0.3, 1.5]);
        let map = |v: &Vec<f64>| -> Vec<f64> {
            (&a * DVector::from_column_slice(v))
                .iter()
                .copied()
                .collect()
        };
        let r2: Vec<Vec<f64>> = r.iter().map(map).collect();
        let m1 = calibrate(&r).unwrap();
        let m2 = calibrate(&r2).unwrap();
        let q = vec![0.7, -1.2, 2.0];
        let d1 = m1.score(&q).unwrap();
        let d2 = m2.score(&map(&q)).unwrap();
        assert!((d1 - d2).abs() < 1e-6, "{d1} vs {d2}");
    }
}
