//! Offline instruction-conditioned reinforcement learning on a toy gridworld.
//!
//! The crate combines three ingredients into one agent:
//!
//! - a categorical value distribution over a fixed atom grid, trained with the
//!   projected distributional Bellman target ([`distributional`]);
//! - a conservative logsumexp penalty that keeps offline Q-values close to the
//!   data ([`agent`]);
//! - a contrastive objective that aligns trajectory and instruction embeddings
//!   ([`alignment`]).
//!
//! The environment ([`gridworld`]) hides a random instruction-to-goal mapping so
//! the number of instructions can grow while the number of distinct tasks stays
//! fixed. [`analysis`] measures how well agents tell instructions apart.

pub mod agent;
pub mod alignment;
pub mod analysis;
pub mod config;
pub mod dataset;
pub mod distributional;
pub mod error;
pub mod gridworld;
pub mod rng;
pub mod tensor;

pub use error::{DailError, Result};
