//! Disentangled query tuning for frozen Vision Transformers.
//!
//! A frozen backbone produces per-block token features without gradients.
//! Trainable query-synthesis blocks build a few task-specific query tokens,
//! frozen knowledge-extraction blocks reuse the backbone's own attention and
//! FFN weights to read the backbone features with those queries, and a small
//! conditional head aggregates everything into class logits. Training only
//! ever stores activations on the query path, which [`accounting`] measures
//! against the usual fine-tuning schemes.

pub mod accounting;
pub mod backbone;
pub mod baselines;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/disentanglement.md")]
    mod disentanglement {}
    #[doc = include_str!("../../../book/src/head.md")]
    mod head {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    mod accounting {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
