//! Test-time adaptation for multi-modal classifiers under single-modality
//! shift.
//!
//! Each step scores every modality's feature redundancy, flags the ones
//! that moved, and trains a full-rank plastic adapter for those while the
//! rest train a low-rank stable adapter anchored to the source model.
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`model`]: encoders, fusion, head and the adapter pairs.
//! - [`redundancy`]: the redundancy score and the biased-set rule.
//! - [`adaptation`]: the objective, parameter selection and one step.
//! - [`datagen`]: the synthetic task, shifts and test streams.
//! - [`harness`]: experiments, ablations and reports.
//! - [`checkpoint`]: binary save and load.

pub mod adaptation;
pub mod batch;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod optim;
pub mod redundancy;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/redundancy.md")]
    mod redundancy {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/streams.md")]
    mod streams {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/checkpoint.md")]
    mod checkpoint {}
    #[doc = include_str!("../../../book/src/limits.md")]
    mod limits {}
}
