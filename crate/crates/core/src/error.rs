use std::path::PathBuf;

use thiserror::Error;

use crate::selection::SelectionTrace;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("mixture component {component} collapsed (total responsibility {mass:.3e})")]
    ComponentCollapse { component: usize, mass: f64 },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    FitFailed(Vec<String>),

    #[error("no factor count up to q = {} passed the bivariate residual screen", .0.q_max)]
    SelectionFailed(Box<SelectionTrace>),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("artifact format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::NumericalDegeneracy(msg.into())
    }

    /// True for failures caused by the numerics of a fit rather than its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDegeneracy(_)
                | Error::ComponentCollapse { .. }
                | Error::Initialization(_)
                | Error::FitFailed(_)
                | Error::Bootstrap(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
