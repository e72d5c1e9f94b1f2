// `!(x > y)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ica;
pub mod inference;
pub mod io;
pub mod model;
pub mod mvn;
pub mod reliability;
pub mod resampling;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod spatial;
pub mod ssc;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SscEstimateF64 = ssc::SscEstimate<f64>;
pub type ProbabilityFieldF64 = ssc::ProbabilityField<f64>;
pub type LinearFormF64 = ssc::LinearForm<f64>;
pub type CovarianceFieldF64 = spatial::CovarianceField<f64>;
pub type DeltaVarianceF64 = spatial::DeltaVariance<f64>;
pub type PairGeometryF64 = spatial::PairGeometry<f64>;
pub type VariogramModelF64 = spatial::VariogramModel<f64>;
pub type BinTableF64 = spatial::BinTable<f64>;
pub type LagPlanF64 = spatial::LagPlan<f64>;
pub type SemivariogramFitF64 = spatial::SemivariogramFit<f64>;
