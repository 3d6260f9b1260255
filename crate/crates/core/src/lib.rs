//! Cross-image correlation-aware visual place recognition.
//!
//! The pipeline turns a batch of place images into global descriptors:
//!
//! 1. a ViT-style [`backbone`] with frozen base weights and a trainable
//!    multi-scale convolution [`adapter`] beside every MLP,
//! 2. spatial-pyramid GeM pooling ([`spm`]) into 14 regional features per
//!    image, with the class token standing in for the whole-image region,
//! 3. a cross-image [`encoder`] that lets region `i` of every image attend
//!    to region `i` of the other images in the same batch,
//! 4. flattening and L2 normalization.
//!
//! Training uses the multi-similarity loss with online pair mining
//! ([`metric`], [`train`]); evaluation is exact cosine retrieval with
//! Recall@N ([`retrieval`]), optionally after [`pca`] reduction.
//! Everything runs on a small reverse-mode [`autodiff`] engine.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod layers;
pub mod metric;
pub mod model;
pub mod optim;
pub mod params;
pub mod pca;
pub mod retrieval;
pub mod spm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// Guide chapters, compiled and run by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
