//! Speculative decoding with a parallel multi-token drafter.
//!
//! A drafter extended with `K` trainable `[MASK]` input tokens proposes `K + 1`
//! next-token distributions in a single forward pass. Candidates drawn from
//! those distributions form a token tree that the target model scores in one
//! forward pass under a tree attention mask; a speculative-sampling walk over
//! the tree then commits tokens whose joint distribution is exactly the
//! target's.
//!
//! Modules:
//! - [`dist`]: distributions, temperature, sampling and residuals
//! - [`model`]: tiny transformer, tabular n-gram oracle, checkpoints
//! - [`drafter`]: parallel drafting and the group-wise training layout
//! - [`tree`]: draft trees, topologies and tree attention
//! - [`engine`]: tree verification and the decoding loops
//! - [`training`]: distillation losses, gradients and the training loop

pub mod dist;
pub mod drafter;
pub mod engine;
mod error;
pub mod model;
pub mod training;
pub mod tree;

pub use dist::{Rng, TokenDistribution, TokenId, Vocabulary};
pub use error::{Error, Result};
