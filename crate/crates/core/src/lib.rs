//! Attribution-guided attention injection for toy sequence-to-sequence
//! transformers.
//!
//! The crate trains a small encoder–decoder "teacher" on synthetic
//! translation tasks, extracts token-level attribution maps from it with a
//! family of explainability methods, injects those maps into the attention of
//! a "student" model, and measures how much each method's maps help the
//! student translate.  Everything runs on a hand-rolled reverse-mode autodiff
//! tape over dense `f64` tensors so the attention internals stay fully
//! inspectable and hookable.

pub mod attribution;
pub mod attributor;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod injection;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
