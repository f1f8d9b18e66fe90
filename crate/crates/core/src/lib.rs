//! Inverse-probability-weighted estimation of survival-incorporated
//! quantiles for point and time-varying treatment regimens.

pub mod cohort;
pub mod inference;
pub mod normal;
pub mod oracle;
pub mod pipeline;
pub mod propensity;
pub mod quantile;
pub mod rng;
pub mod simulate;
pub mod weights;

use thiserror::Error;

/// Any failure surfaced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Cohort(#[from] cohort::CohortError),
    #[error(transparent)]
    Csv(#[from] cohort::CsvError),
    #[error(transparent)]
    Propensity(#[from] propensity::PropensityError),
    #[error(transparent)]
    Weights(#[from] weights::WeightsError),
    #[error(transparent)]
    Quantile(#[from] quantile::QuantileError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error("configuration: {0}")]
    Config(String),
}
