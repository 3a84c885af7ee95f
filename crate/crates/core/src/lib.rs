//! Adversarial training with data augmentation and model weight averaging
//! at desk scale: a small f64 autodiff engine, CIFAR-style data handling,
//! augmentation operators with exact soft-label semantics, PGD-family
//! attacks, a TRADES training loop with EMA weight averaging, and the
//! analysis suite (sweeps, landscapes, ensembles, prediction diversity).

pub mod attack;
pub mod augment;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
