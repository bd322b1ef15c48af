//! Iterative direct sampling for partial-data inverse boundary problems.

pub mod dtn;
pub mod error;
pub mod fem;
pub mod idsm;
pub mod mesh;
pub mod models;
pub mod resolver;

pub use error::{Error, Result};
