//! Decoupled prompt attention laboratory.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod autograd;
pub mod boxes;
pub mod config;
pub mod costing;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod instrument;
pub mod io;
pub mod ipg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use autograd::{Graph, Var};
pub use error::{LabError, Result};
pub use rng::SplitMix64;
pub use tensor::Tensor;
