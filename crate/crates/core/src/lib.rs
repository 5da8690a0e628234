//! Two-stage structure-guided portrait completion.
//!
//! Stage I recovers per-pixel body-part parsing (with pose heatmaps) from a
//! masked portrait; stage II inpaints the hole conditioned on the parsing map
//! with global/local adversarial critics and a perceptual loss; a residual
//! face network sharpens the face window; Poisson blending composites the
//! result. Includes synthetic articulated-figure data, metrics (L1 / PSNR /
//! SSIM / Fréchet feature distance) and a CLI driver.

pub mod error;
pub mod exec;
pub mod tensor;

pub mod nn;

pub mod blend;
pub mod checkpoint;
pub mod data;
pub mod metrics;

pub mod completion;
pub mod face;
pub mod parsing;
pub mod pipeline;

pub use error::{Error, Result};
