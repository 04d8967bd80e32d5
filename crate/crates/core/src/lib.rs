//! Private-mask pre-training at desk scale.
//!
//! The crate covers the whole pipeline on a tiny decoder-only transformer:
//! a reverse-mode autodiff engine ([`autodiff`]), the model ([`model`]),
//! corpus packing and synthetic tasks ([`data`]), gradient-magnitude masks
//! and early-bird discovery ([`mask`]), masked AdamW training and the
//! fine-tuning modes ([`trainer`]), and the landscape / gradient /
//! quadratic-model probes ([`analysis`]).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod quantgeom;
pub mod trainer;

pub use error::{PmpError, Result};
