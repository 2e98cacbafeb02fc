//! Post-network pipeline for long-tailed detection outputs: classification trees and forests
//! that calibrate fine-grained logits, class-aware NMS resampling, noisy-logit diagnostics
//! and COCO-style evaluation with rare / common / frequent breakdowns.

pub mod analysis;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod mask;
pub mod nms;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;
pub mod taxonomy;
pub mod tree_builder;

pub use error::{Error, Result};
