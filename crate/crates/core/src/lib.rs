//! Test-time feature tailoring for pansharpening networks.
//!
//! A pretrained backbone is cut into a feature extractor and a channel
//! mapper; a small residual tailor network is trained per input image on a
//! handful of patches with unsupervised spectral, spatial and consistency
//! losses, then applied to every patch and the results stitched back.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod patch;
pub mod raster;
pub mod seed;
pub mod tailor;
pub mod tensor;
pub mod weights;

pub use error::{ErftError, Result};
pub use tensor::{Real, Tensor};
