//! Rotation-equivariant quaternion convolutional networks for gait
//! classification from 3-axis accelerometer cycles.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod quaternion;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
