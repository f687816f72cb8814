//! Distribution-calibrated pseudo-labeling for semi-supervised multi-label
//! learning, at desk scale.

pub mod calibration;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod thresholding;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
