//! Kernel-level IR: GEMM-template and traversal-template instances.
//!
//! A GEMM instance is a tiled matrix multiply augmented with gather,
//! scatter, and type selection: `Y[S] = X[G] x W[T]`, optionally scaled
//! by a per-row scalar at store time and accumulated with atomics when
//! several rows scatter onto the same target. A traversal instance is a
//! generic per-edge or per-node loop nest whose statements are hoisted to
//! the outermost loop level their reads allow. Both carry the adjacency
//! encoding and materialization choices they were specialized for;
//! schedules change the emitted text, never the semantics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{AdjacencyCsr, HeteroGraph};
use crate::ir::passes::compact_applicable;
use crate::ir::{Access, OpCall, OpKind, ScopeKind, TensorDecl};

/// Materialization choice for edgewise tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One row per edge.
    Vanilla,
    /// One row per unique `(edge type, source)` pair where applicable.
    Compact,
}

impl Layout {
    pub fn label(self) -> &'static str {
        match self {
            Layout::Vanilla => "vanilla",
            Layout::Compact => "compact",
        }
    }
}

/// Sparse adjacency encoding an instance's access scheme resolves against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjacency {
    Coo,
    Csr,
}

impl Adjacency {
    pub fn label(self) -> &'static str {
        match self {
            Adjacency::Coo => "coo",
            Adjacency::Csr => "csr",
        }
    }
}

/// How a materialized tensor's rows are counted and located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Materialization {
    Node,
    Edge,
    CompactPair,
    Weight,
}

impl Materialization {
    pub fn label(self) -> &'static str {
        match self {
            Materialization::Node => "node",
            Materialization::Edge => "edge",
            Materialization::CompactPair => "compact",
            Materialization::Weight => "weight",
        }
    }
}

/// Row domain an instance iterates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowDomain {
    Edges,
    CompactPairs,
    Nodes,
}

impl RowDomain {
    pub fn label(self) -> &'static str {
        match self {
            RowDomain::Edges => "edges",
            RowDomain::CompactPairs => "pairs",
            RowDomain::Nodes => "nodes",
        }
    }
}

/// Scatter applied when storing output rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterKind {
    /// Row `r` stores to row `r`.
    Identity,
    /// Accumulate into the source node's row.
    NodeBySrc,
    /// Accumulate into the destination node's row.
    NodeByDst,
    /// Accumulate into the weight slice of the edge's type.
    WeightByEType,
    /// Accumulate into the weight slice of the node's type.
    WeightByNType,
    /// Accumulate into the single slice of a one-type weight.
    WeightSingle,
}

impl ScatterKind {
    pub fn label(self) -> &'static str {
        match self {
            ScatterKind::Identity => "identity",
            ScatterKind::NodeBySrc => "node_by_src",
            ScatterKind::NodeByDst => "node_by_dst",
            ScatterKind::WeightByEType => "weight_by_etype",
            ScatterKind::WeightByNType => "weight_by_ntype",
            ScatterKind::WeightSingle => "weight_single",
        }
    }

    /// Multiple rows may update one target for every non-identity scatter.
    pub fn needs_atomics(self) -> bool {
        self != ScatterKind::Identity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmSchedule {
    /// Tile width of the underlying tiled matrix multiply.
    pub tile_width: usize,
    /// Elements each lane handles in load/compute/store; 1 disables.
    pub coarsening_factor: usize,
    /// Register cap hint rendered into the launch descriptor.
    pub register_limit_hint: Option<usize>,
}

impl Default for GemmSchedule {
    fn default() -> Self {
        Self {
            tile_width: 16,
            coarsening_factor: 1,
            register_limit_hint: None,
        }
    }
}

impl GemmSchedule {
    pub fn validate(&self) -> Result<(), KernelError> {
        if !matches!(self.coarsening_factor, 1 | 2 | 4) {
            return Err(KernelError::BadSchedule(format!(
                "coarsening factor {} not in {{1, 2, 4}}",
                self.coarsening_factor
            )));
        }
        if self.tile_width == 0 {
            return Err(KernelError::BadSchedule("tile width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("compact inapplicable for {0}")]
    CompactInapplicable(String),
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("edge index {index} out of range ({count} edges)")]
    IndexOutOfRange { index: usize, count: usize },
}

/// A GEMM-template specialization.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmInstance {
    pub kid: usize,
    /// The GEMM-eligible operation this instance computes.
    pub op: OpCall,
    pub op_id: usize,
    /// Loop domain and output materialization.
    pub domain: RowDomain,
    pub out_var: String,
    pub out_mat: Materialization,
    pub scatter: ScatterKind,
    pub atomic_output: bool,
    /// Per-row scalar folded into the store stage, if a consumer fused.
    pub per_row_scalar: Option<String>,
    pub transpose_weight: bool,
    pub schedule: GemmSchedule,
    pub layout: Layout,
    pub adjacency: Adjacency,
    /// Every op id this instance covers (base op plus fused consumers).
    pub fused_ops: Vec<usize>,
    /// Temporaries that no longer reach global memory.
    pub internal: Vec<String>,
}

/// Loop level a traversal statement is hoisted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoistLevel {
    /// Outer per-row level: everything the statement reads is fixed once
    /// the edge (or node) index is known.
    Row,
    /// Innermost feature loop.
    Feature,
}

impl HoistLevel {
    pub fn label(self) -> &'static str {
        match self {
            HoistLevel::Row => "row",
            HoistLevel::Feature => "feat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalStmt {
    pub op: OpCall,
    pub op_id: usize,
    pub hoist: HoistLevel,
}

/// A traversal-template specialization: one loop nest, many statements.
#[derive(Debug, Clone, PartialEq)]
pub struct TraversalInstance {
    pub kid: usize,
    pub scope: ScopeKind,
    pub stmts: Vec<TraversalStmt>,
    pub layout: Layout,
    pub adjacency: Adjacency,
    /// Two-stage reduction before touching global memory; rendered into
    /// the emitted text only.
    pub partial_aggregation: bool,
    pub internal: Vec<String>,
}

impl TraversalInstance {
    pub fn fused_ops(&self) -> Vec<usize> {
        self.stmts.iter().map(|s| s.op_id).collect()
    }
}

/// Specialize a GEMM-eligible operation.
///
/// The compact layout applies only when the operation reads nothing but
/// source-node data and edge-type-selected weights; requesting it
/// otherwise is an error.
pub fn specialize_gemm(
    op: &OpCall,
    op_id: usize,
    ctx: Option<ScopeKind>,
    decls: &BTreeMap<String, TensorDecl>,
    layout: Layout,
    adjacency: Adjacency,
    schedule: GemmSchedule,
    kid: usize,
) -> Result<GemmInstance, KernelError> {
    schedule.validate()?;
    let res_cols = decls.get(&op.result.name).map_or(0, |d| d.cols);
    if layout == Layout::Compact && !compact_applicable(op, ctx, res_cols) {
        return Err(KernelError::CompactInapplicable(op.result.name.clone()));
    }
    let (domain, out_mat) = match ctx {
        Some(ScopeKind::Edges) if layout == Layout::Compact => {
            (RowDomain::CompactPairs, Materialization::CompactPair)
        }
        Some(ScopeKind::Edges) => (RowDomain::Edges, Materialization::Edge),
        Some(k) if k.is_node_scope() => (RowDomain::Nodes, Materialization::Node),
        _ => (RowDomain::Edges, Materialization::Edge),
    };
    let transpose_weight = matches!(
        op.op,
        OpKind::TypedLinear {
            transpose_weight: true
        }
    );
    Ok(GemmInstance {
        kid,
        op: op.clone(),
        op_id,
        domain,
        out_var: op.result.name.clone(),
        out_mat,
        scatter: ScatterKind::Identity,
        atomic_output: false,
        per_row_scalar: None,
        transpose_weight,
        schedule,
        layout,
        adjacency,
        fused_ops: vec![op_id],
        internal: Vec::new(),
    })
}

/// Specialize a run of same-scope operations as one traversal instance,
/// hoisting each statement to the outermost loop level its reads allow:
/// a statement touching feature vectors stays in the feature loop, a
/// scalar-only statement runs once per row.
pub fn specialize_traversal(
    ops: &[(usize, OpCall)],
    scope: ScopeKind,
    decls: &BTreeMap<String, TensorDecl>,
    layout: Layout,
    adjacency: Adjacency,
    kid: usize,
    internal: Vec<String>,
) -> TraversalInstance {
    let width = |r: &crate::ir::VarRef| -> usize {
        decls.get(&r.name).map_or(1, |d| {
            if r.access.is_type_select() || r.access == Access::Plain {
                d.slice_rows * d.cols
            } else {
                d.cols
            }
        })
    };
    let stmts = ops
        .iter()
        .map(|(op_id, op)| {
            let scalar_only =
                width(&op.result) <= 1 && op.args.iter().all(|a| width(a) <= 1);
            TraversalStmt {
                op: op.clone(),
                op_id: *op_id,
                hoist: if scalar_only {
                    HoistLevel::Row
                } else {
                    HoistLevel::Feature
                },
            }
        })
        .collect();
    TraversalInstance {
        kid,
        scope,
        stmts,
        layout,
        adjacency,
        partial_aggregation: true,
        internal,
    }
}

/// Resolve `(etype, src, dst)` for a logical position under an adjacency
/// scheme. COO positions are edge indices and resolve by direct
/// subscript; CSR positions are entry indices and recover the row-keyed
/// endpoint by a binary search in the row pointer array.
pub fn resolve_access(
    g: &HeteroGraph,
    csr: Option<&AdjacencyCsr>,
    adjacency: Adjacency,
    index: usize,
) -> Result<(usize, usize, usize), KernelError> {
    if index >= g.num_edges() {
        return Err(KernelError::IndexOutOfRange {
            index,
            count: g.num_edges(),
        });
    }
    match adjacency {
        Adjacency::Coo => Ok((g.etype(index), g.src(index), g.dst(index))),
        Adjacency::Csr => {
            let csr = csr.expect("CSR scheme requires a built CSR");
            let dst = csr.dst_of_entry(index);
            Ok((csr.etype_of_entry[index], csr.col_idx[index], dst))
        }
    }
}
