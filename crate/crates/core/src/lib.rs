//! Constrained backpropagation (CBP) for feedforward networks.
//!
//! Training minimizes a Lagrangian `L = C + lambda^T cs(W)` in which every
//! constrained weight carries a sawtooth constraint `cs` that vanishes exactly
//! on a quantization grid (binary, ternary, or bit-shift levels scaled per
//! layer). Weights descend on `L` every mini-batch while the multipliers
//! `lambda` ascend on it at epoch boundaries, gated by an unconstrained-weight
//! window that shrinks as training proceeds.
//!
//! Modules:
//!
//! - [`ndcore`]: dense `f64` matrices.
//! - [`constraint`]: grids, the sawtooth `Y`, window `ucs`, gated `cs`, and CFS.
//! - [`quantizer`]: scale factors, the straight-through quantizer, clipping.
//! - [`network`]: dense MLP with manual backprop and STE forward.
//! - [`cbp`]: the optimizer and epoch scheduler.
//! - [`kinetics`]: continuous-time simulation of the same dynamics, Lyapunov
//!   bookkeeping, population tracking, and a FLOP model.
//! - [`harness`]: datasets, configuration, checkpoints, experiments, CLI.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod cbp;
pub mod constraint;
pub mod error;
pub mod harness;
pub mod kinetics;
pub mod ndcore;
pub mod network;
pub mod quantizer;

pub use cbp::{run_cbp, run_cbp_with, CbpConfig, EpochMetrics, TrainState, TrainingMode};
pub use constraint::{make_grid, ConstraintKind, QuantGrid};
pub use error::{Error, Result};
pub use harness::dataset::Dataset;
pub use ndcore::Matrix;
pub use network::{ForwardMode, Network};
