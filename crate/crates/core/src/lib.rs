//! Spikformer with spiking token selection and lottery-ticket weight pruning.

pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod parallel;
pub mod params;
pub mod pruning;
pub mod selector;
pub mod spiking;
pub mod tensor;

pub use error::{Error, Result};
