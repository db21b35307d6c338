//! Cross-modal radar-to-lidar-map localization.
//!
//! A cost-volume measurement network regresses the SE(2) offset between a
//! radar bird's-eye scan and a cropped lidar map; ICP radar odometry drives
//! the prediction step of a differentiable Kalman filter, and the whole
//! pipeline trains by maximum likelihood over pose sequences.

pub mod bev;
pub mod error;
pub mod graph;
pub mod filter;
pub mod losses;
pub mod measnet;
pub mod nn;
pub mod odom;
pub mod pipeline;
pub mod se2;
pub mod synth;

pub use error::{ConfigError, PipelineError};
