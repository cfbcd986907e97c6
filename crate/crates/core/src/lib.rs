//! Learned AP clustering for cell-free massive MIMO downlink.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the harness and CLI use.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod access;
pub mod baseline;
pub mod channel;
pub mod downlink;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod scalar;
pub mod scenario;
pub mod training;

pub use access::{PilotPlan, UplinkConfig};
pub use baseline::baseline_clusters;
pub use channel::{LargeScaleRealization, ShadowModel};
pub use downlink::{ClusterAssignment, DownlinkConfig, DownlinkEvaluation};
pub use error::{Error, Result};
pub use harness::{Dataset, EvalReport, ExperimentConfig, Method};
pub use linalg::Matrix;
pub use policy::{Checkpoint, FeatureNorm, ParamLayout, PolicyParams, UeOrdering};
pub use scalar::Scalar;
pub use scenario::{Point, Scenario, UeDrop};
pub use training::{Environment, Episode, Optimizer, TrainConfig};

pub type Real = f64;
pub type RealMatrix = Matrix<f64>;
pub type RealScenario = Scenario<f64>;
pub type RealDrop = UeDrop<f64>;
pub type RealParams = PolicyParams<f64>;
pub type RealCheckpoint = Checkpoint<f64>;
pub type RealEnvironment = Environment<f64>;
