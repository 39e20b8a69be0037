//! Bandwidth-constrained variational message encoding (BVME) for cooperative
//! multi-agent Q-learning on coordination graphs.
//!
//! The crate is a self-contained CPU stack:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine over f64 tensors,
//!   define-by-run, with the op set the rest of the crate needs.
//! * [`nn`]: MLP and GRU layers, seeded initialization, RMSprop with global
//!   gradient-norm clipping, and a named-parameter checkpoint format.
//! * [`graph`]: attention-based coordination graphs with optional edge-noise
//!   sampling and top-k sparsification.
//! * [`vme`]: the diagonal-Gaussian message posterior, reparameterized
//!   sampling, closed-form KL to an isotropic prior, and the bandwidth
//!   penalty term.
//! * [`value`]: per-agent recurrent Q-networks, the monotonic hypernetwork
//!   mixer, TD targets, and the combined loss.
//! * [`env`]: two small Dec-POMDPs (a gather matrix game and a predator-prey
//!   grid) with deterministic seeded dynamics.
//! * [`runtime`]: episode collection, replay, epsilon schedule, target
//!   network handling, one-step training, and greedy evaluation.
//! * [`harness`]: experiment configs, bandwidth sweeps, learning-curve
//!   metrics (AUC, delta-AUC, drop area), and result/report files.
//! * [`oracle`]: independent verification oracles (Monte-Carlo KL,
//!   central finite differences, exhaustive open-loop policy search) that
//!   never call into the implementation paths they check.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod value;
pub mod vme;

pub use checkpoint::Checkpoint;
pub use error::{BvmeError, Result};
pub use graph::{CoordinationGraph, GraphMode};
pub use harness::{ExperimentConfig, LearningCurve, SweepAxis};
pub use model::{Method, Model, ModelDims};
pub use tensor::{OpKind, Tensor};
pub use vme::{BvmeConfig, BvmePrior, GaussianPosterior};
