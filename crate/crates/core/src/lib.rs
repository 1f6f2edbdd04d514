//! Learned sequential k-space undersampling for MRI on synthetic phantoms.
//!
//! A small reverse-mode autodiff tape (`ad`) carries everything: the
//! centred Fourier measurement model (`forward`), the sampling policy and
//! its straight-through binarisation (`sampler`), the UNet reconstructor
//! (`recon`), and the acquisition loop with its training and evaluation
//! drivers (`pipeline`). `phantom` supplies data, `baselines` and
//! `metrics` the comparisons.

pub mod ad;
pub mod baselines;
pub mod config;
pub mod error;
pub mod export;
pub mod forward;
pub mod gradsuite;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
