//! Variational Bayes for factor stochastic volatility models.

pub mod engine;
pub mod error;
pub mod exec;
pub mod family;
pub mod forecast;
pub mod io;
pub mod joint;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod seq;
pub mod sim;
pub mod srn;
pub mod tbn;
pub mod yj;

pub use error::{Error, Result};
