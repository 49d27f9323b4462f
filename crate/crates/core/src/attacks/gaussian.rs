use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Multivariate normal with a Cholesky factor cached for density queries.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    log_det: f64,
}

fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

impl GaussianFit {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let m = mean.len();
        if covariance.len() != m || covariance.iter().any(|r| r.len() != m) {
            return Err(Error::InputShape {
                expected: m,
                actual: covariance.len(),
            });
        }
        let chol = cholesky(&covariance)?;
        let log_det = 2.0 * (0..m).map(|i| chol[i][i].ln()).sum::<f64>();
        Ok(Self {
            mean,
            covariance,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let m = self.dim();
        if x.len() != m {
            return Err(Error::InputShape {
                expected: m,
                actual: x.len(),
            });
        }
        // Forward substitution: L z = x - mean, so the Mahalanobis term is |z|^2.
        let mut z = vec![0.0; m];
        for i in 0..m {
            let s: f64 = (0..i).map(|k| self.chol[i][k] * z[k]).sum();
            z[i] = (x[i] - self.mean[i] - s) / self.chol[i][i];
        }
        let maha: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * (maha + self.log_det + m as f64 * (2.0 * PI).ln()))
    }
}

/// Sample mean and unbiased sample covariance plus `lambda * I`.
pub fn fit_gaussian(samples: &[Vec<f64>], lambda: f64) -> Result<GaussianFit> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Fit(n));
    }
    let m = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != m) {
        return Err(Error::InputShape {
            expected: m,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0; m];
    for s in samples {
        for (acc, v) in mean.iter_mut().zip(s) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = vec![vec![0.0; m]; m];
    for s in samples {
        for i in 0..m {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..m {
        for j in 0..=i {
            let v = cov[i][j] / (n - 1) as f64;
            cov[i][j] = v;
            cov[j][i] = v;
        }
        cov[i][i] += lambda;
    }
    GaussianFit::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    use super::*;
    use crate::attacks::scale;
    use crate::nn::softmax;
    use crate::rng::rng;

    fn cloud(seed: u64, n: usize, m: usize) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| (0..m).map(|j| r.random::<f64>() * (j + 1) as f64).collect())
            .collect()
    }

    #[test]
    fn identical_samples_give_ridge_covariance() {
        let g = fit_gaussian(&vec![vec![1.0, 2.0]; 5], 1e-6).unwrap();
        assert_eq!(g.mean, vec![1.0, 2.0]);
        assert_eq!(g.covariance, vec![vec![1e-6, 0.0], vec![0.0, 1e-6]]);
    }

    #[test]
    fn one_dimensional_unbiased_variance() {
        let g = fit_gaussian(&[vec![0.0], vec![2.0]], 1e-6).unwrap();
        assert_eq!(g.mean, vec![1.0]);
        assert!((g.covariance[0][0] - (2.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(fit_gaussian(&[vec![1.0]], 1e-6), Err(Error::Fit(1))));
        assert!(matches!(fit_gaussian(&[], 1e-6), Err(Error::Fit(0))));
    }

    #[test]
    fn mean_covariance_and_density_match_linear_algebra_oracle() {
        for seed in 0..20 {
            let m = 1 + (seed as usize % 6);
            let samples = cloud(seed, 12, m);
            let g = fit_gaussian(&samples, 1e-6).unwrap();
            let rows = DMatrix::from_fn(samples.len(), m, |i, j| samples[i][j]);
            let mean = rows.row_mean().transpose();
            for j in 0..m {
                assert!((g.mean[j] - mean[j]).abs() < 1e-12);
            }
            let centered = DMatrix::from_fn(samples.len(), m, |i, j| samples[i][j] - mean[j]);
            let cov = centered.transpose() * &centered / (samples.len() - 1) as f64
                + DMatrix::identity(m, m) * 1e-6;
            for i in 0..m {
                for j in 0..m {
                    assert!((g.covariance[i][j] - cov[(i, j)]).abs() < 1e-12);
                    assert_eq!(g.covariance[i][j], g.covariance[j][i]);
                }
            }
            let eig = cov.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e >= 1e-6 - 1e-12));

            let x = DVector::from_fn(m, |i, _| samples[0][i] + 0.3);
            let d = &x - &mean;
            let maha = (d.transpose() * cov.clone().try_inverse().unwrap() * &d)[(0, 0)];
            let want = -0.5 * (maha + cov.determinant().ln() + m as f64 * (2.0 * PI).ln());
            let got = g.log_pdf(x.as_slice()).unwrap();
            assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn full_scaled_vectors_are_rank_deficient_for_two_classes() {
        let mut r = rng(3);
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let a: f64 = r.random_range(-3.0..3.0);
                let p = softmax(&[a, 0.0]).unwrap();
                let total: f64 = p.probs().iter().sum();
                assert!((p.probs()[1] - (1.0 - p.probs()[0])).abs() < 1e-9);
                assert!((total - 1.0).abs() < 1e-9);
                scale(&p).0
            })
            .collect();
        let n = samples.len();
        let rows = DMatrix::from_fn(n, 2, |i, j| samples[i][j]);
        let mean = rows.row_mean();
        let centered = DMatrix::from_fn(n, 2, |i, j| samples[i][j] - mean[j]);
        let cov = centered.transpose() * centered / (n - 1) as f64;
        let smallest = cov.symmetric_eigen().eigenvalues.min();
        assert!(smallest < 1e-6, "smallest eigenvalue {smallest}");
        assert!(fit_gaussian(&samples, 1e-6).is_ok());
    }
}
