//! Edge-prior augmented motion deblurring.
//!
//! A dual-branch encoder–decoder (content branch plus a quarter-width edge
//! branch whose decoder features gate the content decoder), the edge-weighted
//! training objectives, a Canny edge detector, dataset construction tools
//! (synthetic blur, box filtering, PSNR-driven sliding-window alignment) and
//! PSNR/SSIM evaluation. Everything runs on a small self-contained
//! reverse-mode autodiff engine.

pub mod data;
pub mod edge;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{EdgeMap, Image};
pub use tensor::{Real, Tape, Tensor, Var};
pub use model::{ModelConfig, Network, Variant};
