//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by mesh/volume IO, geometry processing, solvers, and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("voxel grid of {required} nodes exceeds the budget of {budget}; raise the budget or coarsen the spacing")]
    GridBudget { required: usize, budget: usize },

    #[error("duplicate interpolation sites {a} and {b}")]
    DuplicateSites { a: usize, b: usize },

    #[error("interpolation system is singular or ill-conditioned (condition estimate {cond:.3e}); sites may be coplanar or near-duplicate")]
    IllConditioned { cond: f64 },

    #[error("mesh is disconnected; component sizes: {sizes:?}")]
    DisconnectedMesh { sizes: Vec<usize> },

    #[error("duplicate particles {a} and {b} (zero geodesic separation)")]
    DuplicateParticles { a: usize, b: usize },

    #[error("assignment cost at ({row}, {col}) is {value}; costs must be finite and non-negative")]
    InvalidCost { row: usize, col: usize, value: f64 },

    #[error("cohort has {got} shapes but at least {required} are required")]
    CohortTooSmall { got: usize, required: usize },

    #[error("particle count mismatch: {context} has {got} particles, expected {expected}")]
    ParticleCountMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("missing particle file for shape {id}")]
    MissingParticles { id: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} ({context})")]
    NonFinite { what: String, context: String },

    #[error("singular system in {0}")]
    Singular(String),
}

impl Error {
    /// Attach a path to a raw IO error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical origin (as opposed to invalid inputs),
    /// used by callers to pick an exit status.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. } | Error::NonFinite { .. } | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
