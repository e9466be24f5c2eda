//! Spatiotemporal PM2.5 forecasting.
//!
//! The pipeline turns scattered sensor readings into gridded heat maps
//! (Voronoi-weighted sector aggregation), trains convolutional-recurrent
//! networks on heat-map sequences with a small reverse-mode autodiff engine,
//! and scores recursive multi-step forecasts with NRMSE.
//!
//! Modules follow the pipeline order:
//!
//! * [`ingest`]: sensor CSV parsing, resampling, splitting and windowing
//! * [`rasterize`]: sector grid, Voronoi weights and heat-map frames
//! * [`autodiff`]: tensors, the computation graph and layer primitives
//! * [`models`]: baseline recursive predictors, the CRNN and comparators
//! * [`optimize`]: losses, Adadelta, plateau scheduling and the training loop
//! * [`evaluate`]: NRMSE, horizon sweeps, noise robustness and model comparison
//! * [`synth`]: advection-diffusion plume generator and virtual sensors

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod models;
pub mod optimize;
pub mod rasterize;
pub mod synth;

pub use error::{Error, Result};
