//! sdlab-core: a desk-scale laboratory for score-distillation guidance.
//!
//! The crate replaces the usual pretrained-diffusion stack with Gaussian
//! mixtures whose perturbed scores are available in closed form. On top of
//! that substrate it implements the full guidance toolbox used in
//! optimization-based 3D generation: plain score-distillation (`sds_ddpm`),
//! consistency-function guidance (`sds_lcm`), two-stage guidance calibration
//! (`sds_lcm_gc`), interval score matching (`ism`), and variational score
//! distillation (`vsd`), together with a dual-phase decreasing timestep
//! scheduler and a reproducible experiment harness.
//!
//! Every estimator can be checked against independent numerical oracles:
//! an adaptive embedded Runge-Kutta integrator for the probability-flow ODE,
//! finite differences for scores and parameter gradients, and analytic
//! samplers for marginal checks.
//!
//! Numeric kernels are generic over the scalar type via [`Scalar`]; the
//! harness and the concrete aliases below fix `f64`.

pub mod consistency;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod linalg;
pub mod scalar;
pub mod scene;
pub mod schedule;
pub mod scheduler;
pub mod solvers;
pub mod stats;
pub mod target;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` aliases for the main domain types.
pub type NoiseSchedule64 = schedule::NoiseSchedule<f64>;
pub type MixtureTarget64 = target::MixtureTarget<f64>;
pub type Prompt64 = target::Prompt<f64>;
pub type ConsistencyFn64 = consistency::ConsistencyFn<f64>;
pub type GuidanceEstimate64 = guidance::GuidanceEstimate<f64>;
pub type SceneParams64 = scene::SceneParams<f64>;
pub type Camera64 = scene::Camera<f64>;
pub type OptimState64 = scene::OptimState<f64>;
pub type Trajectory64 = solvers::Trajectory<f64>;

/// `f32` aliases for callers that trade precision for footprint.
pub type NoiseSchedule32 = schedule::NoiseSchedule<f32>;
pub type MixtureTarget32 = target::MixtureTarget<f32>;
pub type Prompt32 = target::Prompt<f32>;
