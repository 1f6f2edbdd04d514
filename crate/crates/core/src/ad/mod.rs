//! Minimal reverse-mode automatic differentiation.

mod conv;
pub(crate) mod fft;
mod gradcheck;
pub mod ssim;
mod tape;

pub use gradcheck::{grad_check, grad_check_smooth, GradCheckOptions, GradCheckReport};
pub use ssim::SsimParams;
pub use tape::{DrawForward, Gradients, Tape, Var};
