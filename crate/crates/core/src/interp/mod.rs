//! Reference execution and oracles.
//!
//! `run_forward` executes layer programs directly; `run_plan` executes
//! lowered kernel plans with their materialization and adjacency choices
//! and must agree with `run_forward`: this module is the correctness
//! authority every compiler pass is checked against. Dense brute-force
//! oracles for generalized SpMM/SDDMM and finite-difference gradient
//! checking live here too.
//!
//! All reductions are deterministic: per aggregation target, values are
//! summed in ascending edge order (or CSR entry order when a plan chose
//! the CSR scheme). Parallel execution partitions by output row and
//! preserves those per-target orders, so it is bit-identical to
//! sequential execution.

mod envio;
mod exec;
mod gradcheck;
mod oracle;

pub use envio::{load_env_dir, save_env_dir, EnvIoError};
pub use exec::{run_forward, run_forward_mode, run_plan, run_plan_mode};
pub use gradcheck::{
    analytic_grads, finite_diff_grad, grad_check_all_weights, grad_check_param, loss_of,
    plan_loss, weight_names,
};
pub use oracle::{gsddmm_oracle, gspmm_oracle, rgcn_dense_oracle, spmm_dense};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{AdjacencyCsr, CompactIndex, GraphStats, HeteroGraph};
use crate::tensor::{ExecMode, TensorValue};

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("missing binding for {0}")]
    MissingBinding(String),
    #[error("shape mismatch for {name}: expected {expected}, got {got}")]
    Shape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("missing preprocessing step: {0}")]
    MissingPreprocessing(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("finite differences need a positive step size")]
    ZeroStep,
}

/// Concrete graph plus tensor bindings a program executes against.
#[derive(Debug, Clone)]
pub struct Environment {
    pub graph: HeteroGraph,
    pub csr: Option<AdjacencyCsr>,
    pub compact: Option<CompactIndex>,
    pub stats: Option<GraphStats>,
    pub bindings: BTreeMap<String, TensorValue>,
    pub mode: ExecMode,
}

impl Environment {
    pub fn new(graph: HeteroGraph) -> Self {
        Self {
            graph,
            csr: None,
            compact: None,
            stats: None,
            bindings: BTreeMap::new(),
            mode: ExecMode::default(),
        }
    }

    /// Build every derived structure the kernels might ask for.
    pub fn with_preprocessing(graph: HeteroGraph) -> Self {
        let graph = if graph.is_type_sorted() {
            graph
        } else {
            graph.sort_edges_by_type()
        };
        let csr = graph.build_csr();
        let compact = graph.build_compact_index();
        let stats = graph.stats(&compact);
        Self {
            csr: Some(csr),
            compact: Some(compact),
            stats: Some(stats),
            bindings: BTreeMap::new(),
            mode: ExecMode::default(),
            graph,
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: TensorValue) -> &mut Self {
        self.bindings.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Result<&TensorValue, ExecError> {
        self.bindings
            .get(name)
            .ok_or_else(|| ExecError::MissingBinding(name.to_string()))
    }
}
