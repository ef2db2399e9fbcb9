//! Task-informed fine-tuning of learned CT denoisers, with the numerical
//! observers and figures of merit used to evaluate them.

pub mod config;
pub mod dataset;
pub mod diffnet;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod harness;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod observers;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ImageGrid, RandomStream, SpectrumResult};
