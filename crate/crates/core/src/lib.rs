//! Contrastive language-speech retrieval at desk scale.
//!
//! Speech feature sequences are aligned to token positions with continuous
//! integrate-and-fire, decoded non-autoregressively, quantized onto the
//! vocabulary with a straight-through estimator and mapped through the text
//! encoder's embedding table. Questions and contexts then meet in text space
//! under a symmetric in-batch contrastive objective.

pub mod asr;
pub mod cif;
pub mod compute;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod retriever;
pub mod trainer;
pub mod vq;

pub use error::{ClsrError, Result};
