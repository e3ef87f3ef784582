//! Relative contrastive alignment between image regions, ranked tags and
//! caption nouns.
//!
//! The crate covers the whole pipeline for one image: rank candidate tags
//! against the image ([`tags`]), score each tag against its context with
//! parameter-free attention ([`compat`]), contrast the top half of the ranking
//! against the bottom half ([`loss`]), filter and weight noisy tags
//! ([`uasr`]), and differentiate the result ([`grad`]). A small synthetic
//! trainer ([`synth`], [`train`]) and JSON-lines formats ([`io`]) sit on top.

pub mod cli;
pub mod compat;
pub mod error;
pub mod grad;
pub mod io;
pub mod loss;
pub mod model;
pub mod synth;
pub mod tags;
pub mod train;
pub mod uasr;

pub use error::{RcaError, Result};
pub use model::{ContrastiveInstance, Embedding, EmbeddingMatrix, ScoreMatrix};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/compatibility.md")]
    mod compatibility {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
