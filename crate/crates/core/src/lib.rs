//! Noisy-student self-training for lung-nodule patch classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`gradcheck`]: a small reverse-mode
//!   differentiation engine with SGD.
//! * [`blocks`] and [`model`]: conv/residual/non-local blocks, Maxout heads and
//!   the five network variants.
//! * [`preprocess`] and [`mixup`]: intensity normalization, orthogonal views,
//!   the 27-patch augmentation recipe and Mixup.
//! * [`selftrain`]: teacher/student iterations with pseudo-labels.
//! * [`aggregate`] and [`evaluate`]: noisy-or patient fusion, ROC/AUC and
//!   DeLong's paired test.
//! * [`synth`]: the synthetic labeled set and patient cohorts.

pub mod aggregate;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
mod kernels;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod selftrain;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Mode, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
