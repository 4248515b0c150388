//! Open-set recognition built on joint classification-reconstruction
//! networks.
//!
//! The pipeline: train a convolutional net that classifies and reconstructs
//! its input through bottlenecked lateral connections, describe each known
//! class by the mean of its training features plus a Weibull fit to the tail
//! of distances from that mean, then recalibrate test-time activations into
//! an (N+1)-way score whose extra entry absorbs unknown inputs.

pub mod cli;
pub mod config;
pub mod data;
pub mod dhrnet;
pub mod error;
pub mod evt;
pub mod layers;
pub mod metrics;
pub mod model_io;
pub mod openset;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
