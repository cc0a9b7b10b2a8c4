//! Reinforcement learning with verifiable rewards on a desk-scale token policy.
//!
//! The crate is organised the way a real RLVR pipeline is, just shrunk:
//!
//! - [`policy`]: a tiny autoregressive softmax policy with analytic gradients
//! - [`loss`]: group-normalized advantages and the clipped PG / KL / entropy terms
//! - [`verifier`]: boxed-answer extraction and exact equivalence rewards
//! - [`env`]: synthetic arithmetic task families and dataset files
//! - [`rollout`]: batch construction and grouped sampling
//! - [`selection`]: historical-variance data selection
//! - [`trainer`]: the training loop, optimizer, ablations and checkpoints
//! - [`eval`]: held-out evaluation and training-dynamics diagnostics

pub mod checkpoint;
pub mod env;
pub mod eval;
pub mod loss;
pub mod policy;
pub mod pretrain;
pub mod rng;
pub mod rollout;
pub mod selection;
pub mod trainer;
pub mod verifier;
pub mod vocab;

mod error;

pub use error::{Error, Result};
