//! Experiment driver for the rskel solver: problem setup from JSON configs,
//! solve/scaling/update benchmarks and hole-placement optimization.

use thiserror::Error;

pub mod config;
pub mod experiments;
pub mod optimize;
pub mod output;
pub mod problem;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("geometry: {0}")]
    Geometry(#[from] rskel::geometry::GeometryError),
    #[error("solver: {0}")]
    Solver(#[from] rskel::skel::SkelError),
    #[error("kernel: {0}")]
    Kernel(#[from] rskel::kernels::KernelError),
    #[error("data: {0}")]
    Data(String),
    #[error("optimize: {0}")]
    Optimize(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// Short category used in the one-line diagnostic.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Geometry(_) => "geometry",
            CliError::Solver(_) | CliError::Kernel(_) => "solver",
            CliError::Data(_) => "data",
            CliError::Optimize(_) => "optimize",
            CliError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
