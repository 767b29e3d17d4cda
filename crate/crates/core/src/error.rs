use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Failures raised anywhere in the characterization/calibration pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid material parameters: {0}")]
    InvalidParameters(&'static str),

    #[error("domain error: {0}")]
    Domain(&'static str),

    #[error("return map did not converge after {iterations} iterations (residual {residual:e})")]
    ReturnMap { iterations: usize, residual: f64 },

    #[error("integration failed at increment {increment}: {source}")]
    Integration {
        increment: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("training sample {sample} failed at node {node}: {source}")]
    Training {
        sample: usize,
        node: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("matrix is not positive definite{0}")]
    NotPositiveDefinite(&'static str),

    #[error("gaussian process fit failed: {0}")]
    GpFit(String),

    #[error("no surrogate for node {node}, point {point}")]
    MissingSurrogate { node: usize, point: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("MAP estimation failed: all {starts} starts diverged")]
    Estimation { starts: usize },

    #[error("degenerate posterior, hessian eigenvalues {eigenvalues:?}")]
    DegeneratePosterior { eigenvalues: Vec<f64> },

    #[error("evidence underflow in {count} outer terms")]
    Underflow { count: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("trial failed during {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_increment(self, increment: usize) -> Self {
        Error::Integration {
            increment,
            source: alloc::boxed::Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: alloc::boxed::Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
