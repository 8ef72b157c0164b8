//! Dense-connectivity network toolkit: a small tensor engine with reverse-mode
//! autodiff, concatenation-shortcut building blocks, architecture accounting,
//! a random-network pilot-study harness, training utilities and
//! representation analysis.

pub mod analysis;
pub mod arch_json;
pub mod autodiff;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod randnet;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
