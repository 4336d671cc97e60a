//! Toy segmentation task used to compare smoothing modes end to end.

pub mod compare;
pub mod data;
pub mod metrics;
pub mod model;
pub mod train;
