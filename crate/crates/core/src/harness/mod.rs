//! Datasets, training and experiment drivers.

pub mod config;
pub mod data;
pub mod experiments;
pub mod plot;
pub mod train;
