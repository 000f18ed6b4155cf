//! The two comparison methods: direct regression from features to designs,
//! and multinomial distribution matching with a REINFORCE estimator over
//! kernel density estimates.

mod dr;
mod kde;
mod ms2;

pub use dr::{infer_dr, train_dr, DrConfig, DrCurvePoint, DrModel, DrReport};
pub use kde::{kde_log_density, silverman_bandwidth, Pca};
pub use ms2::{
    ms2_reinforce_step, ms2_search, reinforce_gradient, softmax, Ms2Config, Ms2IterationRecord,
    Ms2SearchOutput, Ms2State, Ms2StepDiagnostics,
};

use thiserror::Error;

use crate::sim::SimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("kernel density estimation needs at least one sample")]
    EmptySamples,
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("simulation failed for design (flat {flat}, sloped {sloped})")]
    Simulation {
        flat: usize,
        sloped: usize,
        #[source]
        source: SimError,
    },
    #[error("multinomial left the simplex: {0}")]
    SimplexViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(String),
}
