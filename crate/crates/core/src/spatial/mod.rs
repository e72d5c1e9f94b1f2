//! Parametric variance of the sSC estimate: pair distances, semivariogram,
//! covariance of the counts and the delta method.

pub mod covariance;
pub mod delta;
pub mod distance;
pub mod semivariogram;

pub use covariance::{binomial_variance, build_covariance, CovarianceField, CovarianceOptions, PsdRepair, Storage};
pub use delta::{delta_from_moments, delta_variance, delta_variance_for, DeltaVariance};
pub use distance::{pair_distance, PairGeometry};
pub use semivariogram::{
    class_residuals, count_field, default_edges, empirical_semivariogram, fit_semivariogram,
    fit_semivariogram_with_starts, BinTable, Family, LagBin, LagPlan, SemivariogramFit, VariogramConfig,
    VariogramModel,
};
