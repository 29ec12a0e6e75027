//! Metric graphs from polygonal tilings: heat semigroup simulation, Nash
//! inequalities through Euler-tour lifting and polygon extensions,
//! ultracontractive and Gaussian kernel bounds.

pub mod bounds;
pub mod check;
pub mod cli;
pub mod constants;
pub mod euler_lift;
pub mod extension;
pub mod functions;
pub mod geometry;
pub mod semigroup;
pub mod skeleton;
pub mod suites;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Graph(#[from] skeleton::SkeletonError),
    #[error(transparent)]
    Function(#[from] functions::FunctionError),
    #[error(transparent)]
    Lift(#[from] euler_lift::LiftError),
    #[error(transparent)]
    Extension(#[from] extension::ExtensionError),
    #[error(transparent)]
    Semigroup(#[from] semigroup::SemigroupError),
    #[error(transparent)]
    Bounds(#[from] bounds::BoundsError),
}
