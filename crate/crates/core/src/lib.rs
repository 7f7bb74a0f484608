//! Non-autoregressive sequence generation with vector-quantized latent codes
//! and glancing training, plus AT/NAT/GLAT baselines, parallel decoding with
//! self-reranking, BLEU evaluation and alignment-based corpus complexity.

pub mod autograd;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod eval;
pub mod glancing;
pub mod inference;
pub mod model;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
