//! Event-triggered learning for probabilistically robust LQR on switched
//! linear-Gaussian plants.

pub mod bayes;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod etl;
pub mod excitation;
pub mod linalg;
pub mod lqr;
pub mod rng;
pub mod synthesis;
pub mod trigger;
pub mod validate;

pub use error::{Error, Result};
