//! Photonic-conditioned knowledge distillation laboratory.
//!
//! A simulated linear-optical sampler produces shot-limited bitstrings; their
//! marginal histograms form a 512-dimensional feature that generates the
//! channel mixing of dictionary convolutions in a compressed student network,
//! which is distilled from a dense teacher CNN. Photonic parameters are tuned
//! with SPSA, student weights with Adam.

pub mod analysis;
pub mod data;
pub mod dictconv;
pub mod error;
pub mod features;
pub mod kd;
pub mod model;
pub mod nn;
pub mod photonic;
pub mod rng;

pub use error::{Error, Result};
