//! Frequency-decoupled evidential anomaly detection for encrypted traffic images.
//!
//! The pipeline turns per-flow packet bytes into `P x H x W` images, splits each
//! image into complementary low/high frequency bands, reconstructs every band with
//! a dedicated attention autoencoder, attaches a Normal-Inverse-Gamma evidential
//! head to each branch, and fuses the two evidential distributions into a single
//! epistemic-uncertainty anomaly score.

pub mod error;
pub mod eval;
pub mod evidential;
pub mod fusion;
pub mod ingest;
pub mod model;
pub(crate) mod rng;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
