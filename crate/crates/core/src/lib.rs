//! Attention variants, embeddings and explicit weight constructions that let
//! a transformer fit an autoregressive model in context, together with the
//! least-squares oracles, synthetic data, dependence-coefficient and bound
//! calculators, and a small reverse-mode trainer.

pub mod baseline;
pub mod construct;
pub mod depbounds;
pub mod encoding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
