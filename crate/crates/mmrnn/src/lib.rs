//! Continuous-time mixed membership recurrent network for grouped count
//! sequences: an LSTM whose prediction is blended with a learned per-group
//! bias by a time-decay weight, in a direct data-level form and a dynamic
//! topic-model form, with training, baselines, and an evaluation harness.

// Validation guards are written `!(x >= 0.0)` on purpose: the negated form
// also rejects NaN, which `x < 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cells;
pub mod data;
pub mod decay;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod par;
pub mod training;

pub use error::{Error, Result};
