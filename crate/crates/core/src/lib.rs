//! Numerical laboratory for SRB-measure machinery on partially hyperbolic
//! example systems.

pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod pesin;
pub mod pliss;
pub mod random;
pub mod systems;

pub use error::{Error, ErrorKind, Result};
