//! Sensor-to-latent-state traffic estimation.

pub mod assignment;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod autodiff;
pub mod datamodel;
pub mod dsg;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod params;
pub mod reference;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
