//! Differentiable multi-agent driving simulation and training.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: a small reverse-mode AD engine.
//! - [`world`]: scene state, kinematic models with analytic Jacobians, observations.
//! - [`rewards`]: differentiable safety rewards and their geometry.
//! - [`policy`]: the hierarchical codebook policy and the posterior network.
//! - [`objectives`]: rollout engines, the three training objectives, gradient diagnostics.
//! - [`multipliers`]: dynamic Lagrange multipliers from the orthogonal Procrustes approximation.
//! - [`metrics`]: reconstruction, infraction and distribution metrics.
//! - [`harness`]: configuration, scenario generation, checkpoints and the trainer.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod multipliers;
pub mod objectives;
pub mod policy;
pub mod rewards;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
