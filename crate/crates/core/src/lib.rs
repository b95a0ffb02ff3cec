//! Product-of-experts debiased training with a frozen, limited-capacity weak
//! learner, plus synthetic bias generators and the diagnostics used to study
//! what the main model learns.

pub mod analysis;
pub mod biasgen;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod models;
pub mod numkernel;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
