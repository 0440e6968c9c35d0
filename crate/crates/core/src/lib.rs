//! Click-driven interactive segmentation.
//!
//! The crate covers the whole loop: a small reverse-mode autodiff engine
//! ([`tensor`]), binary-mask algebra and click simulation ([`mask`],
//! [`clicks`]), a two-stage windowed-attention segmenter with separate image
//! and click patch embeddings ([`model`]), normalized-focal-loss training
//! ([`train`]), Number-of-Clicks evaluation ([`eval`]), memory-readout mask
//! propagation through slice stacks ([`propagation`]) and an HTTP session
//! service ([`service`], behind the `service` feature).

pub mod clicks;
pub mod components;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod propagation;
#[cfg(feature = "service")]
pub mod service;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
