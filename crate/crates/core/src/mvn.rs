//! Multivariate normal draws through a cached lower-triangular factor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factorization {
    Cholesky,
    /// Σ was not positive definite; negative eigenvalues were clipped to 0.
    ClippedEigen {
        clipped: usize,
    },
    /// Σ is identically zero; draws equal the mean.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct MvnSampler {
    mean: Vec<f64>,
    factor: Option<DMatrix<f64>>,
    factorization: Factorization,
}

impl MvnSampler {
    pub fn new(mean: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::invalid(format!(
                "covariance is {}×{}, mean has {n} entries",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("covariance has non-finite entries"));
        }
        if sigma.iter().all(|&x| x == 0.0) {
            return Ok(Self {
                mean,
                factor: None,
                factorization: Factorization::Degenerate,
            });
        }
        if let Some(chol) = sigma.clone().cholesky() {
            return Ok(Self {
                mean,
                factor: Some(chol.l()),
                factorization: Factorization::Cholesky,
            });
        }
        let eig = SymmetricEigen::new(sigma);
        let clipped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
        log::warn!("covariance is not positive definite; clipping {clipped} eigenvalue(s)");
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(Self {
            mean,
            factor: Some(factor),
            factorization: Factorization::ClippedEigen { clipped },
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factorization(&self) -> Factorization {
        self.factorization
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let Some(l) = &self.factor else {
            return self.mean.clone();
        };
        let n = self.dim();
        let z = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let x = l * z;
        x.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_covariance_returns_mean() {
        let s = MvnSampler::new(vec![1.0, 2.0], DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(s.factorization(), Factorization::Degenerate);
        assert_eq!(s.sample(&mut stream(0, &[])), vec![1.0, 2.0]);
    }

    #[test]
    fn sample_moments_match() {
        let sigma = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, 0.0, 1.2, 2.0, -0.5, 0.0, -0.5, 1.0]);
        let mean = vec![1.0, -2.0, 0.5];
        let s = MvnSampler::new(mean.clone(), sigma.clone()).unwrap();
        assert_eq!(s.factorization(), Factorization::Cholesky);
        let mut rng = stream(3, &[]);
        let draws: Vec<Vec<f64>> = (0..200_000).map(|_| s.sample(&mut rng)).collect();
        let n = draws.len() as f64;
        for i in 0..3 {
            let mi = draws.iter().map(|d| d[i]).sum::<f64>() / n;
            assert!((mi - mean[i]).abs() < 0.02, "mean {i}: {mi}");
            for j in 0..3 {
                let mj = draws.iter().map(|d| d[j]).sum::<f64>() / n;
                let c = draws.iter().map(|d| (d[i] - mi) * (d[j] - mj)).sum::<f64>() / (n - 1.0);
                assert!((c - sigma[(i, j)]).abs() < 0.04, "cov {i}{j}: {c}");
            }
        }
    }

    #[test]
    fn indefinite_covariance_falls_back() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let s = MvnSampler::new(vec![0.0, 0.0], sigma).unwrap();
        assert_eq!(s.factorization(), Factorization::ClippedEigen { clipped: 1 });
        // Only the eigenvalue-3 direction (1, 1) survives.
        let x = s.sample(&mut stream(1, &[]));
        assert!((x[0] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(MvnSampler::new(vec![0.0; 3], DMatrix::identity(2, 2)).is_err());
    }
}
