//! Robust asynchronous Newton-Raphson consensus.
//!
//! Nodes of a directed, lossy network each hold a private smooth convex
//! cost. Every node runs a local Newton-Raphson step whose curvature and
//! gradient information is averaged through a ratio consensus that tolerates
//! packet loss by keeping cumulative mass counters. The crate provides the
//! node state machine, the consensus primitives, a seeded discrete-event
//! simulator and an experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod consensus;
pub mod costs;
pub mod experiment;
pub mod graph;
pub mod ingest;
pub mod linalg;
pub mod nrc;
pub mod sim;

pub use consensus::{AugmentedState, Message, RatioNode, RatioState, StepMatrices};
pub use costs::{BinomialDeviance, CostModel, DescentVariant, Quadratic};
pub use graph::DirectedGraph;
pub use ingest::Dataset;
pub use nrc::{Network, NodeState, NrcParams};
pub use sim::{Problem, SimConfig, Trace};
