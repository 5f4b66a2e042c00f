//! Critic-free policy optimization on exact tabular categorical policies.
//!
//! The crate implements group-relative advantage estimation (GRPO), the
//! sequence-ratio variant (GSPO), and dynamic dual-level down-sampling:
//! advantage-variance-maximizing sample selection, entropy x advantage token
//! filtering, and a linear schedule that relaxes both over training. Policies
//! are small enough that every distribution, entropy, KL term and gradient is
//! computed exactly, so the training dynamics can be checked against
//! brute-force oracles.

pub mod advantage;
pub mod config;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod selector;
pub mod tasks;
pub mod theory;
pub mod token_filter;
pub mod trainer;

pub use error::{Error, Result};
