//! Model zoo: builders for the three relational GNN layers the compiler
//! ships with, a deterministic environment factory, and the memory-model
//! report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{CompactIndex, HeteroGraph};
use crate::interp::Environment;
use crate::ir::passes::compact_applicable;
use crate::ir::{
    call, vr, Access, BinaryKind, DimsConfig, OpKind, Program, ProgramBuilder, Role, Scope,
    ScopeKind, Stmt, TensorDecl, UnaryKind,
};
use crate::tensor::{TensorValue, ValueRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Rgcn,
    Rgat,
    Hgt,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Rgcn => "rgcn",
            ModelKind::Rgat => "rgat",
            ModelKind::Hgt => "hgt",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "rgcn" => Some(ModelKind::Rgcn),
            "rgat" => Some(ModelKind::Rgat),
            "hgt" => Some(ModelKind::Hgt),
            _ => None,
        }
    }

    pub fn all() -> [ModelKind; 3] {
        [ModelKind::Rgcn, ModelKind::Rgat, ModelKind::Hgt]
    }
}

/// Output nonlinearity of a layer; identity is the verification default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Exp,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "identity" => Some(Activation::Identity),
            "leakyrelu" => Some(Activation::LeakyRelu),
            "exp" => Some(Activation::Exp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub leaky_slope: f64,
    pub activation: Activation,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            leaky_slope: 0.2,
            activation: Activation::Identity,
        }
    }
}

pub fn build_model(model: ModelKind, dims: &DimsConfig, opts: &ModelOptions) -> Program {
    match model {
        ModelKind::Rgcn => build_rgcn(dims, opts),
        ModelKind::Rgat => build_rgat(dims, opts),
        ModelKind::Hgt => build_hgt(dims, opts),
    }
}

fn final_activation(b: &mut ProgramBuilder, opts: &ModelOptions, from: &str) {
    let act = match opts.activation {
        Activation::Identity => UnaryKind::Identity,
        Activation::LeakyRelu => UnaryKind::LeakyRelu {
            slope: opts.leaky_slope,
        },
        Activation::Exp => UnaryKind::Exp,
    };
    b.scope(
        ScopeKind::DstNodes,
        vec![Stmt::Op(call(
            OpKind::Unary(act),
            vr("out", Access::Node),
            vec![vr(from, Access::Node)],
        ))],
    );
    b.output("out");
}

/// Relational graph convolution: per-edge message `h_src W[etype]` scaled
/// by the per-edge normalization, summed per destination, plus a
/// self-loop term `h W0`.
pub fn build_rgcn(dims: &DimsConfig, opts: &ModelOptions) -> Program {
    let mut b = ProgramBuilder::new("rgcn");
    b.input(TensorDecl::node("h", dims.in_dim));
    b.input(TensorDecl::weight_etype(
        "W",
        dims.edge_types,
        dims.in_dim,
        dims.out_dim,
    ));
    b.input(TensorDecl::weight_single("W0", dims.in_dim, dims.out_dim));
    b.input(TensorDecl::edge("norm", 1));
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("msg", Access::Edge),
                vec![vr("h", Access::Src), vr("W", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::Binary(BinaryKind::Mul),
                vr("wmsg", Access::Edge),
                vec![vr("msg", Access::Edge), vr("norm", Access::Edge)],
            )),
            Stmt::Op(call(
                OpKind::AccumulateSum,
                vr("agg", Access::Dst),
                vec![vr("wmsg", Access::Edge)],
            )),
        ],
    );
    b.scope(
        ScopeKind::DstNodes,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("selfh", Access::Node),
                vec![vr("h", Access::Node), vr("W0", Access::SingleType)],
            )),
            Stmt::Op(call(
                OpKind::Binary(BinaryKind::Add),
                vr("pre", Access::Node),
                vec![vr("agg", Access::Node), vr("selfh", Access::Node)],
            )),
        ],
    );
    final_activation(&mut b, opts, "pre");
    b.finish()
}

/// Single-headed relational graph attention: typed linears project the
/// endpoint features, per-type vectors turn them into logits, a leaky
/// rectifier and an edge softmax produce attention, and the messages
/// (the projected source features) aggregate under those weights.
pub fn build_rgat(dims: &DimsConfig, opts: &ModelOptions) -> Program {
    let mut b = ProgramBuilder::new("rgat");
    b.input(TensorDecl::node("h", dims.in_dim));
    b.input(TensorDecl::weight_etype(
        "W",
        dims.edge_types,
        dims.in_dim,
        dims.out_dim,
    ));
    b.input(TensorDecl::weight_etype("ws", dims.edge_types, 1, dims.out_dim));
    b.input(TensorDecl::weight_etype("wt", dims.edge_types, 1, dims.out_dim));
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("hs", Access::Edge),
                vec![vr("h", Access::Src), vr("W", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::DotProd,
                vr("atts", Access::Edge),
                vec![vr("hs", Access::Edge), vr("ws", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("ht", Access::Edge),
                vec![vr("h", Access::Dst), vr("W", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::DotProd,
                vr("attt", Access::Edge),
                vec![vr("ht", Access::Edge), vr("wt", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::Binary(BinaryKind::Add),
                vr("att0", Access::Edge),
                vec![vr("atts", Access::Edge), vr("attt", Access::Edge)],
            )),
            Stmt::Op(call(
                OpKind::Unary(UnaryKind::LeakyRelu {
                    slope: opts.leaky_slope,
                }),
                vr("att", Access::Edge),
                vec![vr("att0", Access::Edge)],
            )),
        ],
    );
    edge_softmax(&mut b, "att", "atte", "attsum", "attn");
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::Binary(BinaryKind::Mul),
                vr("wmsg", Access::Edge),
                vec![vr("hs", Access::Edge), vr("attn", Access::Edge)],
            )),
            Stmt::Op(call(
                OpKind::AccumulateSum,
                vr("agg", Access::Dst),
                vec![vr("wmsg", Access::Edge)],
            )),
        ],
    );
    final_activation(&mut b, opts, "agg");
    b.finish()
}

/// The shared edge-softmax tail: exponentiate per edge, aggregate per
/// destination through an explicit node/incoming-edges nest, normalize.
fn edge_softmax(b: &mut ProgramBuilder, logit: &str, exp: &str, sum: &str, out: &str) {
    b.scope(
        ScopeKind::Edges,
        vec![Stmt::Op(call(
            OpKind::Unary(UnaryKind::Exp),
            vr(exp, Access::Edge),
            vec![vr(logit, Access::Edge)],
        ))],
    );
    b.scope(
        ScopeKind::DstNodes,
        vec![Stmt::Scope(Scope {
            kind: ScopeKind::IncomingEdges,
            body: vec![Stmt::Op(call(
                OpKind::AccumulateSum,
                vr(sum, Access::Node),
                vec![vr(exp, Access::Edge)],
            ))],
        })],
    );
    b.scope(
        ScopeKind::Edges,
        vec![Stmt::Op(call(
            OpKind::Binary(BinaryKind::Div),
            vr(out, Access::Edge),
            vec![vr(exp, Access::Edge), vr(sum, Access::Dst)],
        ))],
    );
}

/// Heterogeneous-transformer-style layer: per-node-type projections for
/// queries and source features, per-edge-type key and message weights,
/// scaled dot-product attention with an edge softmax, and an
/// attention-weighted aggregation.
pub fn build_hgt(dims: &DimsConfig, opts: &ModelOptions) -> Program {
    let mut b = ProgramBuilder::new("hgt");
    b.input(TensorDecl::node("h", dims.in_dim));
    b.input(TensorDecl::weight_ntype(
        "Wsrc",
        dims.node_types,
        dims.in_dim,
        dims.out_dim,
    ));
    b.input(TensorDecl::weight_ntype(
        "Wq",
        dims.node_types,
        dims.in_dim,
        dims.out_dim,
    ));
    b.input(TensorDecl::weight_etype(
        "Wk",
        dims.edge_types,
        dims.out_dim,
        dims.out_dim,
    ));
    b.input(TensorDecl::weight_etype(
        "Wm",
        dims.edge_types,
        dims.out_dim,
        dims.out_dim,
    ));
    b.scope(
        ScopeKind::DstNodes,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("tfeat", Access::Node),
                vec![vr("h", Access::Node), vr("Wsrc", Access::NType)],
            )),
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("q", Access::Node),
                vec![vr("h", Access::Node), vr("Wq", Access::NType)],
            )),
        ],
    );
    let inv_sqrt_d = 1.0 / (dims.out_dim as f64).sqrt();
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("k", Access::Edge),
                vec![vr("tfeat", Access::Src), vr("Wk", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("msg", Access::Edge),
                vec![vr("tfeat", Access::Src), vr("Wm", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::DotProd,
                vr("logit0", Access::Edge),
                vec![vr("k", Access::Edge), vr("q", Access::Dst)],
            )),
            Stmt::Op(call(
                OpKind::Unary(UnaryKind::Scale(inv_sqrt_d)),
                vr("logit", Access::Edge),
                vec![vr("logit0", Access::Edge)],
            )),
        ],
    );
    edge_softmax(&mut b, "logit", "atte", "attsum", "attn");
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::Binary(BinaryKind::Mul),
                vr("wmsg", Access::Edge),
                vec![vr("msg", Access::Edge), vr("attn", Access::Edge)],
            )),
            Stmt::Op(call(
                OpKind::AccumulateSum,
                vr("agg", Access::Dst),
                vec![vr("wmsg", Access::Edge)],
            )),
        ],
    );
    final_activation(&mut b, opts, "agg");
    b.finish()
}

/// Deterministic random bindings for every program input. The `norm`
/// input, when present, is bound to the graph's per-edge normalization
/// rather than random data.
pub fn standard_env(p: &Program, graph: &HeteroGraph, seed: u64) -> Environment {
    let mut env = Environment::with_preprocessing(graph.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = env.stats.clone().expect("preprocessing builds stats");
    for d in &p.inputs {
        if d.name == "norm" {
            env.bind(
                "norm",
                TensorValue::from_flat(
                    env.graph.num_edges(),
                    1,
                    stats.edge_norm.clone(),
                    ValueRole::Edge,
                ),
            );
            continue;
        }
        let (rows, role) = match d.role {
            Role::Node { ntype: None } => (env.graph.num_nodes(), ValueRole::Node),
            Role::Node { ntype: Some(t) } => (env.graph.node_counts()[t], ValueRole::Node),
            Role::Edge => (env.graph.num_edges(), ValueRole::Edge),
            Role::WeightEType { types } | Role::WeightNType { types } => (
                types * d.slice_rows,
                ValueRole::Weight {
                    types,
                    slice_rows: d.slice_rows,
                },
            ),
            Role::WeightSingle => (
                d.slice_rows,
                ValueRole::Weight {
                    types: 1,
                    slice_rows: d.slice_rows,
                },
            ),
        };
        let data: Vec<f64> = (0..rows * d.cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        env.bind(&d.name, TensorValue::from_flat(rows, d.cols, data, role));
    }
    env
}

/// Dimensions for a graph: type counts from the graph, feature dims given.
pub fn dims_for(g: &HeteroGraph, in_dim: usize, out_dim: usize) -> DimsConfig {
    DimsConfig::new(in_dim, out_dim, g.num_edge_types(), g.num_node_types())
}

// ── memory model ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TensorMem {
    pub name: String,
    pub cols: usize,
    pub rows_vanilla: usize,
    pub rows_compact: usize,
    pub bytes_vanilla: u64,
    pub bytes_compact: u64,
    pub compactable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemReport {
    pub tensors: Vec<TensorMem>,
    pub total_bytes_vanilla: u64,
    pub total_bytes_compact: u64,
    /// Byte totals restricted to the edgewise tensors compaction applies
    /// to; their ratio is exactly the entity compaction ratio.
    pub compactable_bytes_vanilla: u64,
    pub compactable_bytes_compact: u64,
    pub entity_compaction_ratio: f64,
}

/// Size every tensor of the program under both layouts (8 bytes per
/// element). Compaction changes only edgewise tensors whose defining
/// operation it applies to.
pub fn memreport(p: &Program, g: &HeteroGraph, ci: &CompactIndex) -> MemReport {
    let decls = p.infer_decls().expect("program must validate");
    // Which variables' defining ops admit compact materialization.
    let mut compactable: Vec<String> = Vec::new();
    p.visit_ops(|_, ctx, op| {
        let cols = decls.get(&op.result.name).map_or(0, |d| d.cols);
        if compact_applicable(op, ctx, cols) {
            compactable.push(op.result.name.clone());
        }
    });
    let e = g.num_edges();
    let u = ci.unique_count;
    let mut tensors = Vec::new();
    for (name, d) in &decls {
        let rows_vanilla = match d.role {
            Role::Node { ntype: None } => g.num_nodes(),
            Role::Node { ntype: Some(t) } => g.node_counts()[t],
            Role::Edge => e,
            Role::WeightEType { types } | Role::WeightNType { types } => types * d.slice_rows,
            Role::WeightSingle => d.slice_rows,
        };
        let is_compactable = compactable.contains(name);
        let rows_compact = if is_compactable { u } else { rows_vanilla };
        tensors.push(TensorMem {
            name: name.clone(),
            cols: d.cols,
            rows_vanilla,
            rows_compact,
            bytes_vanilla: (rows_vanilla * d.cols * 8) as u64,
            bytes_compact: (rows_compact * d.cols * 8) as u64,
            compactable: is_compactable,
        });
    }
    let total_bytes_vanilla = tensors.iter().map(|t| t.bytes_vanilla).sum();
    let total_bytes_compact = tensors.iter().map(|t| t.bytes_compact).sum();
    let compactable_bytes_vanilla = tensors
        .iter()
        .filter(|t| t.compactable)
        .map(|t| t.bytes_vanilla)
        .sum();
    let compactable_bytes_compact = tensors
        .iter()
        .filter(|t| t.compactable)
        .map(|t| t.bytes_compact)
        .sum();
    MemReport {
        tensors,
        total_bytes_vanilla,
        total_bytes_compact,
        compactable_bytes_vanilla,
        compactable_bytes_compact,
        entity_compaction_ratio: if e == 0 { 1.0 } else { u as f64 / e as f64 },
    }
}
