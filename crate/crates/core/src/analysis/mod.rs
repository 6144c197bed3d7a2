//! Experiment orchestration, statistics and bound checks.

pub mod bounds;
pub mod config;
pub mod ema;
pub mod fit;
pub mod manifest;
pub mod run;
pub mod selftest;
pub mod studies;

pub use bounds::*;
pub use config::*;
pub use ema::*;
pub use fit::*;
pub use manifest::*;
pub use run::*;
pub use selftest::*;
pub use studies::*;
