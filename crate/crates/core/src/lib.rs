//! Dilemma-zone laboratory: signalized approach simulation, synthetic and
//! human stop-or-go episodes, and three decision predictors.

pub mod episode;
pub mod eval;
pub mod error;
pub mod kinematics;
pub mod dataset;
pub mod model;
pub mod persona;
pub mod rng;
pub mod scenario;
pub mod session;

pub use error::{Error, Result};
