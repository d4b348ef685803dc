//! Multi-step nonlinear system identification with forward sensitivity gradients.

pub mod bench;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod models;
pub mod monitor;
pub mod optim;
pub mod oracle;
pub mod sensitivity;

pub use error::{Error, Result};
pub use loss::{BarrierTerm, LossSpec, StepSeed};
pub use model::{Matrix, ModelSpec, Trajectory, Vector};
pub use monitor::{MonitorBounds, StabilityReport};
pub use sensitivity::{full_gradient, GradientOptions, GradientPass};
