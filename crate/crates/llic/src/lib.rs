//! Large-receptive-field learned image codec.
//!
//! A self-contained implementation of transform coding with large
//! self-conditioned depthwise kernels: analysis/synthesis transforms built
//! from spatial and channel transform blocks, a mean-scale hyperprior
//! entropy model, a bit-exact range coder, a training harness, and the
//! evaluation/analysis instruments (PSNR, MS-SSIM, BD-rate, effective
//! receptive field maps, MACs profiling).

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod coder;
pub mod config;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod train;
