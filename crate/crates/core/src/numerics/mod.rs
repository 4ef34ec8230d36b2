//! Spectral representation of L²(0, 1) with Dirichlet boundary conditions,
//! the heat semigroup, Nemytskii maps and keyed noise streams.

mod basis;
mod nemytskii;
mod noise;

pub use basis::{l2_inner, EigenBasis, Field, StepFactors};
pub use nemytskii::{eval_on_grid, nemytskii_apply, GridArgs};
pub use noise::{derive_seed, mix64, step_count, step_ratio, Channel, NoiseCursor, NoiseStream};
