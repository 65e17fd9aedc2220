//! Reconstruction of on-ground trajectories of a camera-carrying observer
//! and the pedestrians around it from ego-centric bounding-box motion.

pub mod autodiff;
pub mod crowdsim;
pub mod egoview;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used throughout the pipeline.
pub type Pose2D = geometry::Pose<f64>;
pub type PoseDelta = geometry::PoseDelta<f64>;
pub type GroundPoint = geometry::Vec2<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
