//! Desk-scale meta-learning laboratory.
//!
//! The crate is organized around four subsystems:
//!
//! - [`diffnet`]: a small fully-connected network with exact reverse-mode
//!   gradients and Hessian-vector products, the differentiable core that
//!   second-order MAML needs.
//! - [`taskgen`]: synthetic regression benchmark generators. Tasks are frozen
//!   random networks (representation layers drawn wide, head drawn narrow) or
//!   sinusoids, organized into finite or unbounded pools.
//! - [`mamltrain`]: episodic MAML training with exact second-order outer
//!   gradients, Adam meta-updates, best/last checkpointing, and baselines
//!   (zero inner steps, head-only ridge adaptation).
//! - [`repmetric`]: quantifies how much adaptation moves the hidden
//!   representations, as one minus the mean canonical correlation between
//!   pre- and post-adaptation activations.
//!
//! Everything is seed-deterministic: rerunning any computation with the same
//! inputs and seeds reproduces results bit-for-bit on the same platform.

pub mod diffnet;
pub mod error;
pub mod mamltrain;
pub mod repmetric;
pub mod rng;
pub mod taskgen;

mod scalar;

pub use error::{Error, Result};
