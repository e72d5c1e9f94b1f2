//! First-order variance of the ratio estimator.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ComponentMask, StreamCounts};
use crate::scalar::Scalar;
use crate::spatial::covariance::CovarianceField;
use crate::ssc::LinearForm;

/// Delta-method variance with the moments it was assembled from.
/// `X = (C_ℓ − A)·N*`, `Y = b − A·N*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaVariance<T> {
    pub variance: T,
    pub mean_numerator: T,
    pub mean_denominator: T,
    pub var_numerator: T,
    pub var_denominator: T,
    pub cov_numerator_denominator: T,
    /// Σ had to be made PSD before the variance was nonnegative.
    pub repaired: bool,
}

impl<T: Scalar> DeltaVariance<T> {
    pub fn se(&self) -> T {
        self.variance.sqrt()
    }
}

/// `(EX/EY)²·[VarX/EX² + VarY/EY² − 2Cov/(EX·EY)]`, unclamped.
pub fn delta_from_moments<T: Scalar>(ex: T, ey: T, var_x: T, var_y: T, cov_xy: T) -> Result<T> {
    if ex == T::zero() || ey == T::zero() || !ex.is_finite() || !ey.is_finite() {
        return Err(Error::DeltaUndefined {
            ex: ex.to_f64_lossy(),
            ey: ey.to_f64_lossy(),
        });
    }
    let r = ex / ey;
    Ok(r * r * (var_x / (ex * ex) + var_y / (ey * ey) - T::of(2.0) * cov_xy / (ex * ey)))
}

/// Variance of `θ̂` for `mask`, with `cov` built on the same support.
pub fn delta_variance<T: Scalar>(
    mask: &ComponentMask,
    counts: &StreamCounts,
    cov: &CovarianceField<T>,
) -> Result<DeltaVariance<T>> {
    let form = LinearForm::<T>::new(mask, counts.n_voxels(), counts.streams_per_seed())?;
    delta_variance_for(&form, cov)
}

/// Same as [`delta_variance`] for a prepared linear form.
pub fn delta_variance_for<T: Scalar>(form: &LinearForm<T>, cov: &CovarianceField<T>) -> Result<DeltaVariance<T>> {
    if form.support() != cov.support() {
        return Err(Error::invalid("covariance support does not match the component"));
    }
    let (ex, ey) = form.evaluate_on_support(cov.mean());
    let u = form.numerator_weights();
    let run = |cov: &CovarianceField<T>| -> Result<DeltaVariance<T>> {
        let (var_x, var_y, ua) = cov.quadratic_forms(&u, form.a());
        let cov_xy = -ua;
        Ok(DeltaVariance {
            variance: delta_from_moments(ex, ey, var_x, var_y, cov_xy)?,
            mean_numerator: ex,
            mean_denominator: ey,
            var_numerator: var_x,
            var_denominator: var_y,
            cov_numerator_denominator: cov_xy,
            repaired: cov.repair().is_some_and(|r| r.clipped > 0),
        })
    };
    let mut out = run(cov)?;
    if out.variance < T::zero() && !cov.is_dense() && cov.model().is_some() {
        log::warn!("negative delta variance {}; repairing covariance", out.variance);
        if let Ok(fixed) = cov.repaired(usize::MAX) {
            out = run(&fixed)?;
        }
    }
    if out.variance < T::zero() {
        log::warn!("delta variance {} clamped to zero", out.variance);
        out.variance = T::zero();
    }
    Ok(out)
}
