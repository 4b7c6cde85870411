//! Keypoint detection learned from a delayed matching reward, with
//! homography estimation, registration metrics and mosaicking.

pub mod cli;
pub mod detector;
pub mod error;
pub mod features;
pub mod geometry;
pub mod imaging;
mod io_util;
pub mod matching;
pub mod mosaic;
pub mod net;
pub mod registration;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
