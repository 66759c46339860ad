//! Sensitivity-convergence coverage for testing neural classifiers.
//!
//! Perturbed inputs are run through a model and each traced neuron's
//! absolute activation change is recorded. A Bayesian fit per neuron decides
//! whether that change has converged, and the fuzzer pushes inputs towards
//! neurons that have not.

pub mod baselines;
pub mod campaign;
pub mod coverage;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod fuzzer;
pub mod perturb;
pub mod rng;
pub mod scalar;
pub mod sensitivity;
pub mod stats;
pub mod tensor;

pub use campaign::{load_campaign, save_campaign, CampaignResult, Technique, Termination};
pub use coverage::{CoverageConfig, CoverageReport};
pub use data::{Dataset, Split};
pub use engine::{Layer, Model};
pub use error::{Error, Result};
pub use fuzzer::{run_campaign, FuzzConfig};
pub use perturb::{Family, PerturbSpec};
pub use scalar::Scalar;
pub use sensitivity::SensitivityStore;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
