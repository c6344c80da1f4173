//! Discrete-event simulator and control plane for elastic vertical scaling of
//! mixture-of-experts inference.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coordinator;
pub mod fabric;
pub mod hmm;
pub mod imm;
pub mod sim;
pub mod topology;
pub mod vmem;
