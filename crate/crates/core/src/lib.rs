//! Slow-fast stochastic systems coupling a scalar particle pair `(ξ, η)` to
//! fields on `(0, 1)`: simulation, averaged effective dynamics and Monte Carlo
//! convergence studies.

pub mod averaging;
pub mod dsl;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod sde;
pub mod spde;
pub mod stats;

pub use error::{Error, Result};
