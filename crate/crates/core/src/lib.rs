//! Embodiment-aware transformer laboratory.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`optim`], [`checkpoint`]: dense tensors, tape-based
//!   reverse-mode autodiff, Adam, and the parameter file format.
//! * [`gpt`]: causal decoder-only transformer.
//! * [`eat`] and [`eabc`]: the embodiment-conditioned sequence policy (and its
//!   embodiment-blind variant) plus the stateless behaviour-cloning baseline.
//! * [`env`]: the morphology-parameterised locomotion surrogate, its experts,
//!   and the step-down fitness task.
//! * [`dataset`], [`train`], [`eval`], [`bo`]: data collection, supervised
//!   training, grid evaluation, and Bayesian morphology search.
//! * [`config`], [`report`]: run configuration and CSV/SVG output.

pub mod bo;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eabc;
pub mod eat;
pub mod embodiment;
pub mod env;
pub mod eval;
pub mod gpt;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use embodiment::{EmbodimentBounds, EmbodimentVector};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
