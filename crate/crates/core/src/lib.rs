//! Control-barrier-function safety filters in a delayed networked control loop.

pub mod barrier;
pub mod bounds;
pub mod closed_loop;
pub mod commands;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod montecarlo;
pub mod mpc;
pub mod qp;
pub mod report;
pub mod robot;
pub mod safety;

pub use error::{Error, Result};
