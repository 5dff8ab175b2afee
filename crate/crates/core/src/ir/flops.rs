//! Multiply/add counting for layer programs.
//!
//! One multiply plus one add per multiply-accumulate. Edgewise operators
//! are charged per edge under the vanilla layout and per unique
//! `(edge type, source)` pair when the compact layout applies to them.

use serde::Serialize;

use super::passes::compact_applicable;
use super::{OpKind, Program, ScopeKind, UnaryKind, WwKind};
use crate::graph::GraphStats;
use crate::kernel::Layout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopEntry {
    pub result: String,
    pub op: String,
    pub rows: u64,
    pub multiplies: u64,
    pub adds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub layout: String,
    pub entries: Vec<FlopEntry>,
    pub total_multiplies: u64,
    pub total_adds: u64,
}

impl FlopReport {
    pub fn entry(&self, result: &str) -> Option<&FlopEntry> {
        self.entries.iter().find(|e| e.result == result)
    }

    pub fn multiplies(&self, result: &str) -> u64 {
        self.entry(result).map_or(0, |e| e.multiplies)
    }
}

/// Count multiplies and adds per operation and in total.
pub fn count_flops(p: &Program, stats: &GraphStats, layout: Layout) -> FlopReport {
    let decls = p.infer_decls().expect("program must validate");
    let node_count = stats
        .in_degree
        .first()
        .map(Vec::len)
        .unwrap_or(0) as u64;
    let mut entries = Vec::new();

    p.visit_ops(|_, ctx, op| {
        let result_decl = decls.get(&op.result.name);
        let res_cols = result_decl.map_or(0, |d| d.cols) as u64;
        let rows: u64 = match ctx {
            Some(ScopeKind::Edges)
            | Some(ScopeKind::IncomingEdges)
            | Some(ScopeKind::OutgoingEdges) => {
                let cols = result_decl.map_or(0, |d| d.cols);
                if layout == Layout::Compact && compact_applicable(op, ctx, cols) {
                    stats.unique_pair_count as u64
                } else {
                    stats.edge_count as u64
                }
            }
            Some(ScopeKind::DstNodes) | Some(ScopeKind::SrcNodes) => node_count,
            None => result_decl.map_or(1, |d| d.role.weight_types() as u64),
        };
        let arg_width = |i: usize| -> u64 {
            let a = &op.args[i];
            let d = &decls[&a.name];
            if a.access.is_type_select() || a.access == super::Access::Plain {
                (d.slice_rows * d.cols) as u64
            } else {
                d.cols as u64
            }
        };
        let (mults, adds): (u64, u64) = match &op.op {
            OpKind::TypedLinear { transpose_weight } => {
                let w = &decls[&op.args[1].name];
                let (din, dout) = if *transpose_weight {
                    (w.cols as u64, w.slice_rows as u64)
                } else {
                    (w.slice_rows as u64, w.cols as u64)
                };
                (rows * din * dout, rows * din * dout)
            }
            OpKind::OuterProd => (rows * arg_width(0) * arg_width(1), 0),
            OpKind::DotProd => (rows * arg_width(0), rows * arg_width(0)),
            OpKind::Unary(UnaryKind::Scale(_)) => (rows * res_cols, 0),
            OpKind::Unary(_) => (0, 0),
            OpKind::Binary(k) => match k {
                super::BinaryKind::Mul | super::BinaryKind::Div => (rows * res_cols, 0),
                super::BinaryKind::Add | super::BinaryKind::Sub => (0, rows * res_cols),
            },
            OpKind::AccumulateSum => (0, rows * arg_width(0)),
            OpKind::WeightWeightProduct(k) => {
                let (a, b) = (&decls[&op.args[0].name], &decls[&op.args[1].name]);
                let work = match k {
                    WwKind::MatVec | WwKind::VecMat => (a.slice_rows * a.cols) as u64,
                    WwKind::VecOuter => a.cols as u64 * b.cols as u64,
                };
                let adds = match k {
                    WwKind::VecOuter => 0,
                    _ => work,
                };
                (rows * work, rows * adds)
            }
            OpKind::RowwiseMatVec { rows: m, cols: n, .. } => {
                let work = rows * (*m as u64) * (*n as u64);
                (work, work)
            }
            OpKind::Reshape { .. } | OpKind::Concat | OpKind::SliceCols { .. } => (0, 0),
        };
        entries.push(FlopEntry {
            result: op.result.name.clone(),
            op: op.op.label(),
            rows,
            multiplies: mults,
            adds,
        });
    });

    let total_multiplies = entries.iter().map(|e| e.multiplies).sum();
    let total_adds = entries.iter().map(|e| e.adds).sum();
    FlopReport {
        layout: layout.label().to_string(),
        entries,
        total_multiplies,
        total_adds,
    }
}
