use alloc::string::String;

/// Errors produced by the reconstruction algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("IoU is undefined for two empty voxel sets")]
    UndefinedIou,

    #[error("{requested} instance channels exceed the capacity of {max}")]
    Capacity { requested: usize, max: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::ContractViolation(msg.into())
}
