//! Optimal feedback control of parametrized dynamical systems through
//! reduced bases and semi-Lagrangian dynamic programming.

pub mod basis;
pub mod bundle;
pub mod domain;
pub mod error;
pub mod hjb;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod reduced;
pub mod riccati;

pub use error::{Error, Result};
