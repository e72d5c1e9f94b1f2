use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Diagnostics carried by a non-converged ICA extraction.
#[derive(Debug, Clone)]
pub struct IcaFailure {
    pub iterations: usize,
    /// Convergence measure after each iteration.
    pub change_log: Vec<f64>,
    /// Maps reached at the last iteration, one row per component.
    pub partial_maps: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid voxel pair ({0}, {0}): pairs need two distinct voxels")]
    InvalidPair(usize),

    #[error("unknown voxel id {0}")]
    UnknownVoxel(String),

    #[error("count {count} for pair ({seed}, {target}) exceeds streams per seed {streams}")]
    CountOverflow {
        seed: String,
        target: String,
        count: u64,
        streams: u32,
    },

    #[error("duplicate record for seed {seed} -> target {target}")]
    DuplicateRecord { seed: String, target: String },

    #[error("baseline connectivity saturates the component: denominator is {0}")]
    DegenerateBaseline(f64),

    #[error("component {label} has {size} voxel(s); at least 2 are required")]
    MaskTooSmall { label: String, size: usize },

    #[error("semivariogram fit needs at least 3 non-empty lag bins, got {0}")]
    InsufficientLags(usize),

    #[error("semivariogram fit produced non-finite parameters")]
    FitDiverged,

    #[error("covariance over {pairs} pairs exceeds the dense budget of {limit}; use the bootstrap instead")]
    CovarianceTooLarge { pairs: usize, limit: usize },

    #[error("delta method undefined: expected numerator {ex} or denominator {ey} is zero")]
    DeltaUndefined { ex: f64, ey: f64 },

    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),

    #[error("need at least 2 replicates for a standard error, got {0}")]
    NotEnoughReplicates(usize),

    #[error("estimate sets cover different subjects")]
    SubjectMismatch,

    #[error("ICA did not converge after {} iterations", .0.iterations)]
    IcaNotConverged(Box<IcaFailure>),

    #[error("{dropped} of {total} bootstrap extractions failed")]
    UnstableExtraction { dropped: usize, total: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}:{line}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Whether the failure is numerical (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateBaseline(_)
                | Error::FitDiverged
                | Error::CovarianceTooLarge { .. }
                | Error::DeltaUndefined { .. }
                | Error::IcaNotConverged(_)
                | Error::UnstableExtraction { .. }
                | Error::NotEnoughReplicates(_)
        )
    }

    /// Whether the failure comes from malformed input data.
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::CountOverflow { .. }
                | Error::DuplicateRecord { .. }
                | Error::UnknownVoxel(_)
                | Error::InvalidPair(_)
        )
    }
}
