//! Phase-field microstructure control.
//!
//! Simulates controlled Allen-Cahn and Cahn-Hilliard dynamics on periodic
//! grids and steers them to target phase patterns with a decoupled
//! data-based pipeline: model-free ILQR for the open-loop plan, least-squares
//! identification of the perturbation dynamics, and time-varying LQR feedback.
//! Recursive MPC and an analytic time-invariant baseline are provided for
//! comparison, together with a seeded Monte-Carlo noise-sweep harness.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the common double-precision instantiation.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod field_io;
pub mod grid;
pub mod harness;
pub mod ilqr;
pub mod jacobian;
pub mod lqr;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod sysid;

#[cfg(test)]
pub(crate) mod testutil;

pub use dynamics::{ControlBounds, Dynamics, Integrator, ModelParams, Pde, TimeStep};
pub use error::{Error, Result};
pub use grid::{ControlField, GoalKind, GoalPattern, GridSpec, PhaseField};
pub use ilqr::{CostParams, IlqrOptions, JacobianSource, Trajectory};
pub use jacobian::LlsCdConfig;
pub use lqr::FeedbackPolicy;
pub use pipeline::{BaselineControl, NoiseSpec, Problem};
pub use scalar::Scalar;
pub use sysid::{LtvModel, SysIdConfig, SysIdMode};

pub type PhaseField64 = PhaseField<f64>;
pub type PhaseField32 = PhaseField<f32>;
pub type ControlField64 = ControlField<f64>;
pub type ControlField32 = ControlField<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type CostParams64 = CostParams<f64>;
pub type Trajectory64 = Trajectory<f64>;
pub type LtvModel64 = LtvModel<f64>;
pub type FeedbackPolicy64 = FeedbackPolicy<f64>;
pub type Problem64 = Problem<f64>;
