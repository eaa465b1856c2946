//! Representational similarity analysis toolkit.
//!
//! Estimates representational dissimilarity matrices (RDMs) from multi-partition
//! activity data, models their sampling covariance, and compares them against
//! model predictions with plain, whitened and rank-based criteria.

pub mod compare;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod noise;
pub mod simulate;

pub use compare::{compare_models, Comparator, ComparisonResult, Criterion, ModelRdm};
pub use covariance::{full_covariance, null_covariance, whitener, xi_matrix, DistanceCovariance};
pub use dataset::{build_contrast_matrix, load_dataset, ActivityDataset, ContrastMatrix};
pub use error::{Error, Result};
pub use estimators::{biased_distances, unbiased_distances, Estimator, Metric, RdmEstimate};
pub use noise::NoiseSpec;
pub use simulate::{run_scenario, scenario_library, AccuracyReport, Scenario};
