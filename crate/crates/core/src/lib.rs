//! Adaptive particle-based statistical shape modeling.
//!
//! Builds corresponding particle systems over cohorts of closed 3D surfaces:
//! each shape carries the same number of ordered particles, optimized jointly
//! so that particle index encodes anatomical correspondence while the
//! particles adaptively sample each surface through a radial-basis implicit
//! reconstruction. The crate provides
//!
//! - mesh / signed-distance-volume containers and file formats ([`mesh`],
//!   [`sdf`], [`io`], [`shape`]),
//! - polyharmonic implicit-surface fitting from oriented particles ([`rbf`]),
//! - graph geodesics, farthest-point sampling, and geodesic walks ([`geodesy`]),
//! - cohort initialization via ICP reference selection and optimal assignment
//!   ([`init`], [`hungarian`]),
//! - the differentiable losses and the two-stage SGD optimizer ([`losses`],
//!   [`optimizer`]) with a geodesic correspondence repair pass ([`regularizer`]),
//! - shape-model quality metrics: compactness, generalization, specificity,
//!   surface reconstruction error ([`metrics`]),
//! - synthetic cohort families with known ground truth ([`synthetic`]).

pub mod assignment;
pub mod error;
pub mod geodesy;
pub mod init;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod optimizer;
pub mod rbf;
pub mod regularizer;
pub mod sdf;
pub mod shape;
pub mod synthetic;

pub use error::{Error, Result};
