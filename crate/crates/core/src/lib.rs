//! Class-incremental learning with cross-space clustering and controlled
//! transfer distillation, built on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod checkpoint;
pub mod compare;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
