//! Self-supervised traversability estimation on RGB-D frames.
//!
//! A guide filter network fuses surface normals predicted from RGB-D input
//! with visual features through per-pixel dynamic filters; a footprint
//! supervision module propagates sparse footprint labels with a one-step
//! random walk. Around the network sit synthetic scene generation,
//! footprint projection, cost-map accumulation, RRT* planning and the
//! evaluation metrics.

pub mod error;
pub mod frame;
pub mod fsm;
pub mod geometry;
pub mod gfn;
pub mod gradsuite;
pub mod checkpoint;
pub mod costmap;
pub mod dataset;
pub mod model;
pub mod planner;
pub mod synth;
pub mod trainer;
pub mod nn;

pub use error::{Error, Result};
pub use frame::{Intrinsics, Pose, RgbdFrame, SurfaceNormalImage};
pub use model::{Model, ModelConfig};
