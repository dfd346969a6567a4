//! Core of an RGB-thermal crowd counter built around multi-attention fusion.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//!
//! * [`tensor`] and [`autodiff`]: a small deterministic tensor engine with a
//!   reverse-mode tape and a finite-difference gradient checker ([`gradcheck`]).
//! * [`attention`]: patch embedding, multi-head attention, intra/cross modality
//!   attention and the stacked fusion module.
//! * [`model`]: two-stream convolutional encoder with fusion sites and the
//!   multi-scale dilated regression head.
//! * [`density`]: Gaussian ground-truth density maps, GAME/MAE/RMSE and the
//!   MSE training loss.
//! * [`optim`]: AdamW with linear warmup.
//! * [`data`]: paired samples, geometric augmentation and the synthetic scene
//!   renderer.
//!
//! File formats, dataset IO and the command line live in the `mafnet` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod data;
pub mod density;
mod error;
pub mod exact;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
