//! Self-supervised amodal video segmentation at desk scale.
//!
//! The crate generates synthetic occlusion videos with exact ground truth
//! ([`synthgen`]), warps masks differentiably ([`warp`]), scores predictions with
//! occlusion-aware self-supervised losses ([`losses`]), predicts amodal masks and
//! motion with a recurrent network ([`model`]), trains and adapts it
//! ([`trainer`]) and evaluates full and occluded mean-IoU ([`evalkit`]).

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod error;
pub mod evalkit;
pub mod grid;
pub mod losses;
pub mod model;
pub mod patch;
pub mod report;
pub mod synthgen;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
