pub mod autodiff;
pub mod baselines;
pub mod candidate;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod hyperopt;
pub mod signal;
pub mod space;

pub use error::{Error, Result};
