//! Physics-informed learned dynamics for off-road ground vehicles.

pub mod augment;
pub mod bins;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod kbm;
pub mod mppi;
pub mod nav;
pub mod observation;
pub mod sim;
pub mod state;
pub mod terrain;
pub mod train;

pub use error::{Error, Result};
