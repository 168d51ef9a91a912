//! Cross-domain sequential recommendation with orthogonal preference
//! decomposition: three Transformer encoders disentangled by adversarial
//! training, alignment, and separation constraints, fused at
//! recommendation time through token-level cross-attention gating.

pub mod backbone;
pub mod corpus;
pub mod disentangle;
pub mod error;
pub mod evaluate;
pub mod fuser;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod synth;

pub use error::CoreError;
