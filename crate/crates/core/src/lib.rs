//! Parameter estimation for mechanistic ODE growth models from sparse,
//! asynchronous observations.
//!
//! Two estimators are provided: multi-start BFGS maximum likelihood, and an
//! amortized Deep Set inference network trained through a neural proxy of
//! the model and optionally fine-tuned against the model itself.

pub mod amortized;
pub mod bench;
pub mod error;
pub mod fitting;
pub mod likelihood;
pub mod model;
pub mod neural;
pub mod observation;
pub mod ode;

pub use error::{Error, Result, SolverError};
pub use likelihood::{LatentParams, NoiseModel};
pub use model::{ModelId, ModelSpec, NaturalParams};
pub use observation::{DatasetRecord, ObservationSet, ObservationTriplet};
pub use ode::{SolverConfig, Trajectory};
