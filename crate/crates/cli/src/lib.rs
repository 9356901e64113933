//! `epan`: edge detection, dataset building, training, inference and
//! evaluation for the motion-deblurring models.

pub mod commands;
pub mod config;
pub mod error;
