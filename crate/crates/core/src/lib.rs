//! Layerwise learning for parametrized quantum circuits.
//!
//! A dense statevector simulator, random layered circuit templates,
//! parameter-shift gradients with exact or shot-sampled readout, masked Adam,
//! layerwise (LL) and complete-depth (CDL) training schedules, an MNIST
//! PCA/angle-encoding pipeline and the experiment harnesses built from them.
//!
//! Work that fans out over independent items (scan trials, training runs,
//! batch samples) goes through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and a plain loop otherwise.

pub mod circuits;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gradients;
pub mod rng;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
