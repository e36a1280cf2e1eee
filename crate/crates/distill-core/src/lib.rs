//! Desk-scale knowledge-distillation laboratory.
//!
//! The crate builds everything from first principles on small MLPs: a dense
//! tensor type with reverse-mode autodiff, network components with a
//! versioned checkpoint format, the loss family used by logit- and
//! feature-matching distillation, seven training strategies, synthetic 2-D
//! tasks, and an empirical probe for the teacher-to-student error bound.

pub mod bound;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod nn;
pub mod loss;
pub mod runner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
