//! ODE-informed regression: gradient matching with Gaussian processes where
//! the ODE enters as a constraint on the derivative GP.

pub mod dataset;
pub mod derivative_gp;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod integrator;
pub mod kernel;
pub mod linalg;
pub mod odin;
pub mod ode_models;
pub mod optimizer;
pub mod risk;

pub use dataset::{GroundTruth, TimeSeriesDataset};
pub use error::{OdinError, Result, Stage};
pub use kernel::{KernelFamily, KernelHyperparams};
pub use odin::{fit, gp_baseline, OdinConfig, OdinResult};
pub use ode_models::{lookup, OdeSystem};
pub use risk::{RiskContext, GAMMA_MIN};
