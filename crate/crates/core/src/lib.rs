//! Texture classification with an ensemble of encoding heads on a shared
//! convolutional backbone.
//!
//! [`ensemble::EnsembleModel`] is the model, [`training::train`] fits one
//! split, and [`experiments::run_ablation`] runs every head subset. The
//! `texton` binary in [`cli`] drives all of it from the command line.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod te;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/index.md")]
    mod index {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/fractal.md")]
    mod fractal {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
