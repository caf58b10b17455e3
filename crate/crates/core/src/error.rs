use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A point scaled outside the `[-1, 1]` cube of the feature volume.
    #[error("point lies outside the representable volume")]
    OutOfBounds,

    /// No node exists at one of the active levels for the queried point.
    #[error("point is outside the map's boundary")]
    OutsideMap,

    #[error("volumes cannot be merged: {0}")]
    InvalidMerge(String),

    #[error("batch has no sample inside the map")]
    EmptyBatch,

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("registration infeasible: {inliers} inliers (need at least {required})")]
    RegistrationInfeasible { inliers: usize, required: usize },

    #[error("damped normal equations stayed singular after {escalations} damping escalations")]
    StepFailure { escalations: usize },

    #[error("registration diverged")]
    Diverged { last_stable: crate::geometry::RigidTransform },

    #[error("map is empty")]
    EmptyMap,

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
