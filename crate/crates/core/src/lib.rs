//! Compiler core for relational graph neural networks.
//!
//! The pipeline mirrors how an RGNN layer actually executes: a layer program
//! is written in a loop-nest IR over graph scopes (`ir`), optimized
//! (compact materialization decisions, linear-operator reordering, loop
//! canonicalization and fusion), lowered onto two kernel templates: a
//! gather/scatter GEMM and a node/edge traversal (`kernel`, `lower`): and
//! finally rendered as kernel source text plus host descriptors (`emit`).
//!
//! Everything is verifiable at desk scale: `interp` executes both the
//! source programs and the lowered plans on concrete heterogeneous graphs
//! (`graph`) and provides dense brute-force oracles and finite-difference
//! gradient checking so that every transformation can be cross-checked.

pub mod emit;
pub mod graph;
pub mod interp;
pub mod ir;
pub mod kernel;
pub mod lower;
pub mod tensor;
pub mod zoo;

pub use graph::{AdjacencyCsr, CompactIndex, GraphError, GraphStats, HeteroGraph, SynthSpec};
pub use tensor::{ExecMode, TensorValue};
