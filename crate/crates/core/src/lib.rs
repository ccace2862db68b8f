//! Dual model predictive diffusion: belief-space planning for an ego vehicle
//! merging into traffic whose drivers have unknown behavior parameters.

pub mod belief;
pub mod controller;
pub mod diffusion;
pub mod par;
pub mod rng;
pub mod scenario;
pub mod vehicle;

pub use rng::{SimRng, StreamSeed};
pub use vehicle::{
    ControlBounds, DriverParams, Dynamics, EgoControl, JointState, NoiseModel, TrafficModel, VehicleGeometry,
    VehicleState,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("failed to parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
