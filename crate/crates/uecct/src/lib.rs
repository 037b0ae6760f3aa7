//! Code-agnostic transformer decoding for binary linear block codes.
//!
//! One model serves every registered code: received words are standardized by
//! zero-padding, attention uses learnable memories shared across heads, and a
//! per-code {0, −∞} mask derived from the extended parity-check matrix H̄
//! confines attention to the code's own structure, letting a sparse kernel
//! skip the masked work. Classical scaffolding (encoding, AWGN simulation,
//! hard-decision / exhaustive-ML / sum-product decoders) provides the ground
//! truth the learned decoder is measured against.

pub mod alist;
pub mod analysis;
pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gf2;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
