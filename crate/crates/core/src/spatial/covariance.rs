//! Covariance of the pair counts implied by a fitted semivariogram.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentMask, StreamCounts, VoxelGrid};
use crate::scalar::Scalar;
use crate::spatial::distance::PairGeometry;
use crate::spatial::semivariogram::VariogramModel;
use crate::ssc::LinearForm;

/// How Σ is held in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    /// Materialized, optionally repaired to PSD.
    Dense,
    /// Entries evaluated on demand from the model.
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceOptions {
    pub storage: Storage,
    /// Largest support materialized densely.
    pub max_dense_pairs: usize,
    /// Clip negative eigenvalues of a dense Σ.
    pub psd_repair: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            storage: Storage::Dense,
            max_dense_pairs: 4000,
            psd_repair: true,
        }
    }
}

impl CovarianceOptions {
    pub fn lazy() -> Self {
        Self {
            storage: Storage::Lazy,
            ..Self::default()
        }
    }
}

/// Outcome of eigenvalue clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdRepair {
    pub min_eigenvalue: f64,
    pub clipped: usize,
}

/// Mean and covariance of the counts on the pairs a linear form touches.
#[derive(Debug, Clone)]
pub struct CovarianceField<T> {
    support: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    mean: Vec<T>,
    variance: Vec<T>,
    model: Option<VariogramModel<T>>,
    geometry: Option<Arc<PairGeometry<T>>>,
    dense: Option<Vec<T>>,
    repair: Option<PsdRepair>,
}

/// Binomial variance `N p̂(1−p̂)` with `p̂` kept inside `[1/(2N), 1−1/(2N)]`.
pub fn binomial_variance<T: Scalar>(count: T, streams: u32) -> T {
    let n = T::of(f64::from(streams));
    let eps = T::one() / (T::of(2.0) * n);
    let p = (count / n).max(eps).min(T::one() - eps);
    n * p * (T::one() - p)
}

impl<T: Scalar> CovarianceField<T> {
    /// Σ from a semivariogram model over `support` (pair indices, ascending).
    pub fn from_model(
        geometry: Arc<PairGeometry<T>>,
        support: Vec<usize>,
        mean: Vec<T>,
        streams_per_seed: u32,
        model: VariogramModel<T>,
        options: CovarianceOptions,
    ) -> Result<Self> {
        if mean.len() != support.len() {
            return Err(Error::invalid("mean and support lengths differ"));
        }
        let index = geometry.pair_index();
        let pairs = support.iter().map(|&z| index.pair(z)).collect::<Result<Vec<_>>>()?;
        let variance = mean.iter().map(|&m| binomial_variance(m, streams_per_seed)).collect();
        let mut field = Self {
            support,
            pairs,
            mean,
            variance,
            model: Some(model),
            geometry: Some(geometry),
            dense: None,
            repair: None,
        };
        if options.storage == Storage::Dense {
            field.materialize(options)?;
        }
        Ok(field)
    }

    /// Σ given explicitly as a row-major `n × n` matrix.
    pub fn explicit(support: Vec<usize>, mean: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        let n = support.len();
        if mean.len() != n || sigma.len() != n * n {
            return Err(Error::invalid("explicit covariance has inconsistent dimensions"));
        }
        let variance = (0..n).map(|i| sigma[i * n + i]).collect();
        Ok(Self {
            support,
            pairs: Vec::new(),
            mean,
            variance,
            model: None,
            geometry: None,
            dense: Some(sigma),
            repair: None,
        })
    }

    fn materialize(&mut self, options: CovarianceOptions) -> Result<()> {
        let n = self.len();
        if n > options.max_dense_pairs {
            return Err(Error::CovarianceTooLarge {
                pairs: n,
                limit: options.max_dense_pairs,
            });
        }
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|a| (0..n).map(|b| self.model_entry(a, b)).collect())
            .collect();
        let mut dense: Vec<T> = rows.into_iter().flatten().collect();
        if options.psd_repair {
            self.repair = Some(clip_to_psd(&mut dense, n));
        }
        self.dense = Some(dense);
        Ok(())
    }

    fn model_entry(&self, a: usize, b: usize) -> T {
        if a == b {
            return self.variance[a];
        }
        let (Some(model), Some(geo)) = (&self.model, &self.geometry) else {
            return T::zero();
        };
        let c = model.covariance(geo.between(self.pairs[a], self.pairs[b]));
        c.min((self.variance[a] * self.variance[b]).sqrt())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn variance(&self) -> &[T] {
        &self.variance
    }

    pub fn model(&self) -> Option<&VariogramModel<T>> {
        self.model.as_ref()
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn repair(&self) -> Option<PsdRepair> {
        self.repair
    }

    /// Entry `(a, b)` in support coordinates.
    pub fn entry(&self, a: usize, b: usize) -> T {
        match &self.dense {
            Some(d) => d[a * self.len() + b],
            None => self.model_entry(a, b),
        }
    }

    /// Row-major copy of Σ.
    pub fn to_dense(&self) -> Vec<T> {
        match &self.dense {
            Some(d) => d.clone(),
            None => {
                let n = self.len();
                (0..n * n).map(|i| self.entry(i / n, i % n)).collect()
            }
        }
    }

    /// A dense, PSD-repaired copy of a model-based field.
    pub fn repaired(&self, max_dense_pairs: usize) -> Result<Self> {
        let mut out = self.clone();
        out.dense = None;
        out.materialize(CovarianceOptions {
            storage: Storage::Dense,
            max_dense_pairs,
            psd_repair: true,
        })?;
        Ok(out)
    }

    /// `(u′Σu, w′Σw, u′Σw)`.
    pub fn quadratic_forms(&self, u: &[T], w: &[T]) -> (T, T, T) {
        let n = self.len();
        assert!(u.len() == n && w.len() == n, "vector length must match the support");
        let rows: Vec<(T, T, T)> = (0..n)
            .into_par_iter()
            .map(|a| {
                let (mut su, mut sw) = (T::zero(), T::zero());
                for b in 0..n {
                    let s = self.entry(a, b);
                    su = su + s * u[b];
                    sw = sw + s * w[b];
                }
                (u[a] * su, w[a] * sw, u[a] * sw)
            })
            .collect();
        rows.into_iter().fold((T::zero(), T::zero(), T::zero()), |acc, r| {
            (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2)
        })
    }
}

fn clip_to_psd<T: Scalar>(dense: &mut [T], n: usize) -> PsdRepair {
    if n == 0 {
        return PsdRepair {
            min_eigenvalue: 0.0,
            clipped: 0,
        };
    }
    let m = DMatrix::from_fn(n, n, |i, j| dense[i * n + j].to_f64_lossy());
    let eig = m.symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let clipped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if clipped > 0 {
        let lambda = eig.eigenvalues.map(|l| l.max(0.0));
        let q = &eig.eigenvectors;
        let fixed = q * DMatrix::from_diagonal(&lambda) * q.transpose();
        for i in 0..n {
            for j in 0..n {
                dense[i * n + j] = T::of(0.5 * (fixed[(i, j)] + fixed[(j, i)]));
            }
        }
    }
    PsdRepair {
        min_eigenvalue,
        clipped,
    }
}

/// Σ for the pairs within or touching `mask`, with observed counts as μ.
pub fn build_covariance<T: Scalar>(
    counts: &StreamCounts,
    grid: &VoxelGrid,
    model: &VariogramModel<T>,
    mask: &ComponentMask,
    options: CovarianceOptions,
) -> Result<CovarianceField<T>> {
    if grid.len() != counts.n_voxels() {
        return Err(Error::invalid("grid and counts disagree on the number of voxels"));
    }
    let form = LinearForm::<T>::new(mask, counts.n_voxels(), counts.streams_per_seed())?;
    let geometry = Arc::new(PairGeometry::new(grid));
    CovarianceField::from_model(
        geometry,
        form.support().to_vec(),
        form.gather(counts),
        counts.streams_per_seed(),
        *model,
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::semivariogram::Family;

    fn instance(storage: Storage) -> (CovarianceField<f64>, StreamCounts) {
        let grid = VoxelGrid::regular_2d(5, 2).unwrap();
        let idx = crate::model::PairIndex::new(10);
        let dense: Vec<u32> = (0..idx.len() as u32).map(|z| (z * 5 + 1) % 21).collect();
        let counts = StreamCounts::from_dense(10, 20, &dense).unwrap();
        let mask = ComponentMask::new("c", vec![1, 2, 6, 7], 10).unwrap();
        let model = VariogramModel::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let opts = CovarianceOptions {
            storage,
            psd_repair: false,
            ..CovarianceOptions::default()
        };
        (build_covariance(&counts, &grid, &model, &mask, opts).unwrap(), counts)
    }

    #[test]
    fn binomial_diagonal_with_clamp() {
        assert_eq!(binomial_variance(10.0f64, 20), 5.0);
        assert!((binomial_variance(0.0f64, 20) - 20.0 * (1.0 / 40.0) * (39.0 / 40.0)).abs() < 1e-12);
        assert!((binomial_variance(20.0f64, 20) - binomial_variance(0.0f64, 20)).abs() < 1e-12);
        let (cov, counts) = instance(Storage::Lazy);
        for (a, &z) in cov.support().iter().enumerate() {
            let c = f64::from(counts.get_index(z));
            assert_eq!(cov.entry(a, a), binomial_variance(c, 20));
        }
    }

    #[test]
    fn correlations_bounded_and_symmetric() {
        let (cov, _) = instance(Storage::Lazy);
        for a in 0..cov.len() {
            for b in 0..cov.len() {
                let s = cov.entry(a, b);
                assert_eq!(s, cov.entry(b, a));
                assert!(s.abs() <= (cov.entry(a, a) * cov.entry(b, b)).sqrt() + 1e-12);
                assert!(s >= 0.0);
            }
        }
    }

    #[test]
    fn far_pairs_are_uncorrelated() {
        let grid = VoxelGrid::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [1e4, 0.0, 0.0], [1e4 + 1.0, 0.0, 0.0]]).unwrap();
        let geo = Arc::new(PairGeometry::<f64>::new(&grid));
        let idx = geo.pair_index();
        let support = vec![idx.index(0, 1).unwrap(), idx.index(2, 3).unwrap()];
        let model = VariogramModel::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let cov =
            CovarianceField::from_model(geo, support, vec![5.0, 5.0], 20, model, CovarianceOptions::lazy()).unwrap();
        assert_eq!(cov.entry(0, 1), 0.0);
    }

    #[test]
    fn ten_voxel_sigma_is_psd() {
        // Counts at N/2 give binomial variances equal to the sill.
        let grid = VoxelGrid::regular_2d(5, 2).unwrap();
        let counts = StreamCounts::from_dense(10, 20, &[10; 45]).unwrap();
        let mask = ComponentMask::new("c", vec![1, 2, 6, 7], 10).unwrap();
        let model = VariogramModel::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let opts = CovarianceOptions {
            psd_repair: false,
            ..CovarianceOptions::default()
        };
        let cov = build_covariance(&counts, &grid, &model, &mask, opts).unwrap();
        let n = cov.len();
        let m = DMatrix::from_row_slice(n, n, &cov.to_dense());
        let min = m.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn dense_and_lazy_agree() {
        let (dense, _) = instance(Storage::Dense);
        let (lazy, _) = instance(Storage::Lazy);
        assert_eq!(dense.to_dense(), lazy.to_dense());
        let u: Vec<f64> = (0..dense.len()).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..dense.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let (a, b) = (dense.quadratic_forms(&u, &w), lazy.quadratic_forms(&u, &w));
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
    }

    #[test]
    fn clipping_repairs_indefinite_matrix() {
        let mut m: Vec<f64> = vec![1.0, 2.0, 2.0, 1.0];
        let r = clip_to_psd(&mut m, 2);
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-12);
        assert_eq!(r.clipped, 1);
        let fixed = DMatrix::from_row_slice(2, 2, &m);
        assert!(fixed.symmetric_eigen().eigenvalues.min() > -1e-12);
        assert!((m[0] - 1.5).abs() < 1e-12 && (m[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn too_large_for_dense() {
        let grid = VoxelGrid::regular_2d(5, 2).unwrap();
        let counts = StreamCounts::from_dense(10, 20, &[3; 45]).unwrap();
        let mask = ComponentMask::new("c", vec![1, 2, 6, 7], 10).unwrap();
        let model = VariogramModel::new(Family::Exponential, 1.0, 4.0, 1.0).unwrap();
        let opts = CovarianceOptions {
            max_dense_pairs: 10,
            ..CovarianceOptions::default()
        };
        assert!(matches!(
            build_covariance::<f64>(&counts, &grid, &model, &mask, opts),
            Err(Error::CovarianceTooLarge { limit: 10, .. })
        ));
    }
}
