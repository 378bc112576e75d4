//! Neural-network training viewed as a discrete-time dynamical system.
//!
//! The crate estimates Lyapunov exponents of the parameter trajectory,
//! feeds them back into the learning rate ([`optimizers::LeAwareState`]),
//! and trains small MLPs on synthetic domain-shift suites with adversarial
//! augmentation.

pub mod augment;
pub mod diffengine;
pub mod domains;
mod error;
pub mod harness;
pub mod linalg;
pub mod lyapunov;
pub mod optimizers;
pub mod seeds;

pub use diffengine::{Activation, Batch, ModelSpec, OutputKind, ParamVector, Targets};
pub use domains::DomainDataset;
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, MetricsRow, RunResult, RunStatus};
pub use linalg::Matrix;
pub use optimizers::{Optimizer, OptimizerConfig, OptimizerKind};
