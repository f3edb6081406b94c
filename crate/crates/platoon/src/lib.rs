//! Distributed model predictive control for heterogeneous vehicle platoons
//! under unidirectional communication topologies.
//!
//! The crate is organized around the control loop: [`vehicle`] holds the
//! longitudinal dynamics of a single vehicle, [`topology`] the directed
//! communication graph, [`ocp`] the per-node optimal control problem and its
//! solver, [`engine`] the synchronous solve/shift/exchange loop, [`monitor`]
//! the runtime checks of the stability machinery, and [`scenario`] the
//! configuration, preset and trace-output layer used by the CLI.

pub mod engine;
pub mod error;
pub mod monitor;
pub mod ocp;
pub mod scenario;
pub mod topology;
pub mod vehicle;

pub use error::PlatoonError;
