//! Adversarial-input defense for spiking image classifiers: a noise-level
//! estimator and a reconstruction network purify inputs before they reach
//! the classifier, and the purification distance doubles as an attack
//! detector. Ships with a small autodiff tensor engine, L-infinity attack
//! implementations, and a reproducible experiment harness.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
