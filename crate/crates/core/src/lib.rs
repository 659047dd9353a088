//! Temporal probabilistic human pose and shape estimation at desk scale.
//!
//! The crate is generic over the scalar type; the aliases at the root fix it
//! to `f64`.

pub mod body_model;
pub mod camera;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod regression_head;
pub mod rotations;
pub mod scalar;
pub mod temporal_encoder;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numeric::Tensor<f64>;
pub type Graph = numeric::Graph<f64>;
pub type ParamSet = numeric::ParamSet<f64>;
pub type AdamState = numeric::AdamState<f64>;
pub type BodyModel = body_model::BodyModel<f64>;
pub type MeshOutput = body_model::MeshOutput<f64>;
pub type CameraParams = camera::CameraParams<f64>;
pub type Mat3 = rotations::Mat3<f64>;
pub type Rot6D = rotations::Rot6D<f64>;
pub type AxisAngle = rotations::AxisAngle<f64>;
pub type PoseModel = model::PoseModel<f64>;
