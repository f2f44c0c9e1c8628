pub mod cli;
pub mod config;
pub mod drift;
pub mod dynamics;
pub mod error;
mod kernels;
pub mod model;
pub mod spatial;
pub mod stabilization;
pub mod stats;
pub mod validation;
pub mod viability;
