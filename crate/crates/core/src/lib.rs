//! Training lab for studying output-logit divergence in small decoder-only
//! language models and the head strategies that suppress it.

// Validation uses `!(x > 0.0)` style checks on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
