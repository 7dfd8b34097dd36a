//! Self-supervised labeling and prediction of stereo perception failures.
//!
//! A simulated robot drives through synthetic scenes with a stereo pair and
//! an exact range sensor. Disagreements between a stereo obstacle detector
//! and the range sensor label image patches as TP/FP/FN/TN; a small CNN with
//! Monte Carlo dropout learns to predict those labels from the left image
//! alone, and its embeddings are clustered to group failure modes.

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod image;
pub mod introspection;
pub mod io;
pub mod labelgen;
pub mod monitor;
pub mod network;
pub mod par;
pub mod perception;
pub mod worldsim;

pub use error::{Error, ErrorCategory, Result};
