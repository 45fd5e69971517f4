//! Dual-view long-term time-series forecasting.
//!
//! A visual forecaster (a small masked autoencoder over period-stacked images
//! of the series) and a numerical forecaster (linear map or patch transformer)
//! are combined through a learnable gate. Two decompositions route components
//! to each view: a moving-average split and a backcast-residual split driven
//! by two complementary masked reconstructions of the look-back image.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerical;
pub mod par;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
