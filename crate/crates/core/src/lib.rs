//! Diffusion and flow-matching training objectives, samplers, and
//! evaluation metrics on small synthetic problems.
//!
//! Everything runs in `f64` on a small tape-based autodiff core, with
//! explicit seeded random streams so that every result is reproducible.

pub mod autodiff;
pub mod bespoke;
pub mod blob;
pub mod coupling;
pub mod error;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod tensor;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
