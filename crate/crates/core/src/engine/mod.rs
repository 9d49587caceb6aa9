//! Decoding loops: parallel-draft speculative decoding with tree verification,
//! the autoregressive baseline, and chain speculative sampling with a small
//! autoregressive drafter.

mod decode;
mod session;
mod trace;
mod verify;

pub use decode::{
    autoregressive_decode, chain_sps_decode, empirical_sequence_distribution, speculative_decode, DecodeConfig,
    DecodeSession, Decoded, OracleDrafter,
};
pub use session::{CausalSession, TabularSession, TransformerSession};
pub use trace::{DecodeTrace, RoundRecord};
pub use verify::{verify_tree, NodeVerdict, RoundOutcome};
#[doc(hidden)]
pub use verify::{verify_tree_with, Fault};
