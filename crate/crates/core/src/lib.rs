//! Weakly-supervised object localization with adversarial erasing and
//! pseudo labels, trained from image-level labels only.
//!
//! A shared feature extractor feeds a classifier and a localizer. The
//! localizer's per-class foreground map is trained through seven loss terms
//! ([`losses`]); boxes are read off that map at evaluation time ([`eval`]).
//! Gradients come from the small tape-based engine in [`autodiff`].
//!
//! ```
//! use wsol::data::{generate, DatasetSpec};
//! use wsol::eval::{evaluate, predict_all, DEFAULT_THETA};
//! use wsol::model::{ModelConfig, WsolNet};
//!
//! let spec = DatasetSpec { num_classes: 2, samples_per_class: 2, ..Default::default() };
//! let samples = generate(&spec).unwrap();
//! let net = WsolNet::init(ModelConfig { num_classes: 2, ..Default::default() }).unwrap();
//! let report = evaluate(&samples, &predict_all(&net, &samples).unwrap(), 0.5, DEFAULT_THETA).unwrap();
//! assert!(report.top1 <= report.gt_known);
//! ```

// `!(x >= t)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod masks;
pub mod model;
pub mod train;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
