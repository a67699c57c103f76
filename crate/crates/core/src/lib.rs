//! Linear self-attention as an in-context learner for Markov chains.
// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilinear;
pub mod closed_form;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod lsa;
pub mod markov_data;
pub mod multiobjective;
pub mod reparam;
pub mod rng;

pub use error::{Error, Result};
