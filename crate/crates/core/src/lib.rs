//! Learned k-space under-sampling for compressed-sensing MRI.
//!
//! The crate jointly optimizes a probabilistic Cartesian sampling mask and a
//! U-Net reconstruction network, generates benchmark masks, and scores
//! reconstructions with MSE, MAE, PSNR, SSIM and HFEN.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fourier;
pub mod masks;
pub mod metrics;
pub mod pgm;
pub mod reconnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
