//! Fluid–plate interaction with Navier slip: transformed-domain operators,
//! spectral Galerkin reduction of the linearized coupled operator, Hautus test,
//! delayed boundary feedback and closed-loop simulation.

// tensor formulas read best with explicit indices; negated comparisons also reject NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod commands;
pub mod config;
pub mod delay_control;
pub mod discretization;
pub mod error;
pub mod geometry;
pub mod numerics;
pub mod simulation;
pub mod spectral_analysis;
pub mod transform_ops;
pub mod verification;

pub use error::{FsiError, Result};
