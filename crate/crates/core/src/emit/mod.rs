//! Deterministic emission of kernel source text and host descriptors.
//!
//! Kernels are rendered in a small C-like dialect (grammar in
//! `docs/kernel-dialect.md`, parser in [`grammar`]): a header with typed
//! parameters, a `launch` descriptor, `def` lines binding the access
//! specializations (`GetSrcId_<kid>` and friends, expanded per adjacency
//! scheme), then the loop nest with gather/scatter expressions and
//! `atomic_add` stores where several rows update one target. Emitting the
//! same plan twice yields byte-identical text.

pub mod grammar;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::ir::{Access, OpCall, OpKind, ScopeKind, TensorDecl, UnaryKind, VarRef};
use crate::kernel::{
    Adjacency, GemmInstance, HoistLevel, Materialization, RowDomain, ScatterKind,
    TraversalInstance,
};
use crate::lower::{ExecUnit, KernelPlan};

/// Dataset preparation a plan requires before any kernel can run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum PreprocessingStep {
    SortEdgesByType,
    CooToCsr,
    BuildCompactIndex,
    Transpose(String),
}

impl PreprocessingStep {
    pub fn label(&self) -> String {
        match self {
            PreprocessingStep::SortEdgesByType => "sort_edges_by_type".into(),
            PreprocessingStep::CooToCsr => "coo_to_csr".into(),
            PreprocessingStep::BuildCompactIndex => "build_compact_index".into(),
            PreprocessingStep::Transpose(t) => format!("transpose:{t}"),
        }
    }
}

/// Minimal deduplicated preprocessing list, ordered by dependence: the
/// type sort precedes the CSR conversion and the compact index, both of
/// which are derived from the sorted edge order.
///
/// Operand transposes never show up here: the GEMM template applies them
/// on the fly in its load scheme, so `Transpose` fires only for plans
/// whose instances demand a pre-transposed tensor outright.
pub fn collect_preprocessing(plan: &KernelPlan) -> Vec<PreprocessingStep> {
    let mut steps = Vec::new();
    let has_kernels = !plan.gemms.is_empty() || !plan.traversals.is_empty();
    if has_kernels {
        steps.push(PreprocessingStep::SortEdgesByType);
    }
    if has_kernels && plan.adjacency == Adjacency::Csr {
        steps.push(PreprocessingStep::CooToCsr);
    }
    if plan
        .materialization
        .values()
        .any(|m| *m == Materialization::CompactPair)
    {
        steps.push(PreprocessingStep::BuildCompactIndex);
    }
    steps
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelDesc {
    pub kid: usize,
    pub name: String,
    pub template: String,
    pub file: String,
    pub grid: String,
    pub block: String,
    pub operands: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairRecord {
    pub forward: String,
    pub backward: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: String,
    pub layout: String,
    pub adjacency: String,
    pub kernels: Vec<KernelDesc>,
    pub fallback: Vec<String>,
    pub preprocessing: Vec<String>,
    pub pairs: Vec<PairRecord>,
}

/// Emitted bundle: kernel texts keyed by file name plus the manifest.
#[derive(Debug, Clone)]
pub struct EmittedArtifact {
    pub manifest: Manifest,
    pub kernels: Vec<(String, String)>,
}

impl EmittedArtifact {
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("serializable") + "\n"
    }

    /// Write `manifest.json` and `kernels/<name>.k` under `dir`.
    pub fn write_to_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("kernels"))?;
        std::fs::write(dir.join("manifest.json"), self.manifest_json())?;
        for (file, text) in &self.kernels {
            std::fs::write(dir.join("kernels").join(file), text)?;
        }
        Ok(())
    }
}

/// Emit every kernel of a plan plus the manifest; `backward`, when
/// given, contributes its kernels with names prefixed `bwd_` and one
/// pairing record per forward instance.
pub fn emit_plan(plan: &KernelPlan, backward: Option<&KernelPlan>) -> EmittedArtifact {
    let mut kernels: Vec<(String, String)> = Vec::new();
    let mut descs: Vec<KernelDesc> = Vec::new();

    let mut emit_one = |plan: &KernelPlan, prefix: &str, unit: &ExecUnit| -> Option<String> {
        match unit {
            ExecUnit::Gemm(i) => {
                let g = &plan.gemms[*i];
                let name = format!("{prefix}gemm_{}", g.kid);
                let (text, grid, block, operands) = emit_gemm(plan, g, &name);
                kernels.push((format!("{name}.k"), text));
                descs.push(KernelDesc {
                    kid: g.kid,
                    name: name.clone(),
                    template: "gemm".into(),
                    file: format!("kernels/{name}.k"),
                    grid,
                    block,
                    operands,
                });
                Some(name)
            }
            ExecUnit::Traversal(i) => {
                let t = &plan.traversals[*i];
                let name = format!("{prefix}traversal_{}", t.kid);
                let (text, grid, block, operands) = emit_traversal(plan, t, &name);
                kernels.push((format!("{name}.k"), text));
                descs.push(KernelDesc {
                    kid: t.kid,
                    name: name.clone(),
                    template: "traversal".into(),
                    file: format!("kernels/{name}.k"),
                    grid,
                    block,
                    operands,
                });
                Some(name)
            }
            ExecUnit::Fallback(_) => None,
        }
    };

    for unit in &plan.order {
        emit_one(plan, "", unit);
    }
    let mut pairs: Vec<PairRecord> = Vec::new();
    if let Some(bwd) = backward {
        let mut bwd_names: Vec<(Vec<usize>, String)> = Vec::new();
        for unit in &bwd.order {
            if let Some(name) = emit_one(bwd, "bwd_", unit) {
                let origins = origins_of_unit(bwd, unit);
                bwd_names.push((origins, name));
            }
        }
        // One pairing record per forward instance: backward kernels whose
        // statements differentiate an op this instance covers.
        for unit in &plan.order {
            let (fwd_name, fwd_ops) = match unit {
                ExecUnit::Gemm(i) => {
                    let g = &plan.gemms[*i];
                    (format!("gemm_{}", g.kid), g.fused_ops.clone())
                }
                ExecUnit::Traversal(i) => {
                    let t = &plan.traversals[*i];
                    (format!("traversal_{}", t.kid), t.fused_ops())
                }
                ExecUnit::Fallback(_) => continue,
            };
            let mut backs: Vec<String> = bwd_names
                .iter()
                .filter(|(origins, _)| origins.iter().any(|o| fwd_ops.contains(o)))
                .map(|(_, n)| n.clone())
                .collect();
            backs.dedup();
            pairs.push(PairRecord {
                forward: fwd_name,
                backward: backs,
            });
        }
    }

    let fallback = plan
        .fallback
        .iter()
        .map(|f| format!("{}:{}", f.op.op.label(), f.op.result.name))
        .collect();
    let manifest = Manifest {
        schema_version: 1,
        model: plan.program.name.clone(),
        layout: plan.layout.label().into(),
        adjacency: plan.adjacency.label().into(),
        kernels: descs,
        fallback,
        preprocessing: collect_preprocessing(plan)
            .into_iter()
            .map(|s| s.label())
            .collect(),
        pairs,
    };
    EmittedArtifact { manifest, kernels }
}

fn origins_of_unit(plan: &KernelPlan, unit: &ExecUnit) -> Vec<usize> {
    let op_origin = |id: usize| -> Option<usize> {
        let mut found = None;
        plan.program.visit_ops(|i, _, op| {
            if i == id {
                found = op.origin;
            }
        });
        found
    };
    let ids = match unit {
        ExecUnit::Gemm(i) => plan.gemms[*i].fused_ops.clone(),
        ExecUnit::Traversal(i) => plan.traversals[*i].fused_ops(),
        ExecUnit::Fallback(i) => vec![plan.fallback[*i].op_id],
    };
    ids.into_iter().filter_map(op_origin).collect()
}

// ── shared rendering helpers ──────────────────────────────────────────

struct Params {
    /// name -> dims text, in first-use order.
    list: Vec<(String, String)>,
}

impl Params {
    fn new() -> Self {
        Self { list: Vec::new() }
    }

    fn add(&mut self, name: &str, dims: String) {
        if !self.list.iter().any(|(n, _)| n == name) {
            self.list.push((name.to_string(), dims));
        }
    }

    fn render(&self) -> String {
        self.list
            .iter()
            .map(|(n, d)| format!("{n}: {d}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn tensor_dims(plan: &KernelPlan, name: &str, decl: &TensorDecl) -> String {
    let mat = plan
        .materialization
        .get(name)
        .copied()
        .unwrap_or(Materialization::Edge);
    match decl.role {
        crate::ir::Role::Node { .. } => format!("f64[num_nodes, {}]", decl.cols),
        crate::ir::Role::Edge => match mat {
            Materialization::CompactPair => format!("f64[num_pairs, {}]", decl.cols),
            _ => format!("f64[num_edges, {}]", decl.cols),
        },
        crate::ir::Role::WeightEType { types } | crate::ir::Role::WeightNType { types } => {
            format!("f64[{types}, {}, {}]", decl.slice_rows, decl.cols)
        }
        crate::ir::Role::WeightSingle => {
            format!("f64[1, {}, {}]", decl.slice_rows, decl.cols)
        }
    }
}

/// Index-array parameters for one adjacency scheme.
fn adjacency_params(adjacency: Adjacency, params: &mut Params) {
    match adjacency {
        Adjacency::Coo => {
            params.add("row_idx", "u32[num_edges]".into());
            params.add("dst_idx", "u32[num_edges]".into());
            params.add("etype_ptr", "u32[num_etypes_plus_1]".into());
        }
        Adjacency::Csr => {
            params.add("row_ptr", "u32[num_nodes_plus_1]".into());
            params.add("col_idx", "u32[num_edges]".into());
            params.add("etype_of_entry", "u32[num_edges]".into());
        }
    }
}

/// The `Get*` specialization bindings for one kernel id, expanded per
/// adjacency scheme: COO resolves by direct subscript, CSR recovers the
/// row-keyed endpoint with a binary search in the row pointer array.
fn accessor_defs(kid: &str, adjacency: Adjacency) -> String {
    match adjacency {
        Adjacency::Coo => format!(
            "  def GetEType_{kid}(e) = segment_of(etype_ptr, e);\n  def GetSrcId_{kid}(e) = row_idx[e];\n  def GetDstId_{kid}(e) = dst_idx[e];\n"
        ),
        Adjacency::Csr => format!(
            "  def GetEType_{kid}(e) = etype_of_entry[e];\n  def GetSrcId_{kid}(e) = col_idx[e];\n  def GetDstId_{kid}(e) = binary_search(row_ptr, e);\n"
        ),
    }
}

/// Row expression of an operand inside an edge-domain kernel.
fn operand_row_expr(
    plan: &KernelPlan,
    kid: &str,
    a: &VarRef,
    params: &mut Params,
    decls: &BTreeMap<String, TensorDecl>,
) -> String {
    let mat = plan
        .materialization
        .get(&a.name)
        .copied()
        .unwrap_or(Materialization::Edge);
    if let Some(d) = decls.get(&a.name) {
        params.add(&a.name, tensor_dims(plan, &a.name, d));
    }
    match a.access {
        Access::Edge => match mat {
            Materialization::CompactPair => {
                params.add("pair_of_edge", "u32[num_edges]".into());
                "pair_of_edge[e]".to_string()
            }
            _ => "e".to_string(),
        },
        Access::Src => format!("GetSrcId_{kid}(e)"),
        Access::Dst => format!("GetDstId_{kid}(e)"),
        Access::EType => format!("GetEType_{kid}(e)"),
        Access::SrcNType => {
            params.add("node_type", "u32[num_nodes]".into());
            format!("node_type[GetSrcId_{kid}(e)]")
        }
        Access::DstNType => {
            params.add("node_type", "u32[num_nodes]".into());
            format!("node_type[GetDstId_{kid}(e)]")
        }
        Access::Node => "n".to_string(),
        Access::NType => {
            params.add("node_type", "u32[num_nodes]".into());
            "node_type[n]".to_string()
        }
        Access::SingleType => "0".to_string(),
        Access::Plain => "0".to_string(),
    }
}

// ── GEMM emission ─────────────────────────────────────────────────────

/// Render a GEMM instance per the tiled template: per-tile staging loads,
/// a sync, the multiply-accumulate, a sync, then the guarded store with
/// gather/scatter and the optional per-row scalar applied.
pub fn emit_gemm(plan: &KernelPlan, g: &GemmInstance, name: &str) -> (String, String, String, Vec<String>) {
    let decls = plan.program.infer_decls().expect("plan program validates");
    let kid = g.kid.to_string();
    let mut params = Params::new();
    let tile = g.schedule.tile_width;
    let cf = g.schedule.coarsening_factor;

    let (rows_sym, row_iter_defs) = match g.domain {
        RowDomain::Edges => ("num_edges", accessor_defs(&kid, g.adjacency)),
        RowDomain::Nodes => (
            "num_nodes",
            format!("  def GetNType_{kid}(n) = node_type[n];\n"),
        ),
        RowDomain::CompactPairs => (
            "num_pairs",
            format!(
                "  def GetEType_{kid}(p) = segment_of(unique_etype_ptr, p);\n  def GetSrcId_{kid}(p) = unique_row_idx[p];\n"
            ),
        ),
    };
    match g.domain {
        RowDomain::Edges => adjacency_params(g.adjacency, &mut params),
        RowDomain::Nodes => params.add("node_type", "u32[num_nodes]".into()),
        RowDomain::CompactPairs => {
            params.add("unique_row_idx", "u32[num_pairs]".into());
            params.add("unique_etype_ptr", "u32[num_etypes_plus_1]".into());
        }
    }

    // Output tensor dims follow the scatter target.
    let out_decl = decls
        .get(&g.out_var)
        .expect("instance output is declared");
    params.add(&g.out_var, tensor_dims(plan, &g.out_var, out_decl));

    let is_outer = g.op.op == OpKind::OuterProd;
    let x = &g.op.args[0];
    let w = &g.op.args[1];
    let row_of = |a: &VarRef, params: &mut Params| -> String {
        let idx = match g.domain {
            RowDomain::Nodes => match a.access {
                Access::Node => "n".to_string(),
                Access::NType => {
                    params.add("node_type", "u32[num_nodes]".into());
                    "node_type[n]".to_string()
                }
                Access::SingleType => "0".to_string(),
                _ => operand_row_expr(plan, &kid, a, params, &decls),
            },
            RowDomain::CompactPairs => match a.access {
                Access::Src => format!("GetSrcId_{kid}(p)"),
                Access::EType => format!("GetEType_{kid}(p)"),
                Access::SrcNType => {
                    params.add("node_type", "u32[num_nodes]".into());
                    format!("node_type[GetSrcId_{kid}(p)]")
                }
                Access::Edge => "p".to_string(),
                _ => operand_row_expr(plan, &kid, a, params, &decls),
            },
            RowDomain::Edges => operand_row_expr(plan, &kid, a, params, &decls),
        };
        if let Some(d) = decls.get(&a.name) {
            params.add(&a.name, tensor_dims(plan, &a.name, d));
        }
        idx
    };
    let row_var = match g.domain {
        RowDomain::Nodes => "n",
        RowDomain::CompactPairs => "p",
        RowDomain::Edges => "e",
    };

    let x_row = row_of(x, &mut params);
    let w_row = row_of(w, &mut params);
    let (d_in, d_out) = {
        let wd = &decls[&w.name];
        if g.transpose_weight {
            (wd.cols, wd.slice_rows)
        } else {
            (wd.slice_rows, wd.cols)
        }
    };
    let out_cols = if is_outer {
        let xa = &decls[&x.name];
        let wb = &decls[&w.name];
        xa.cols * wb.cols
    } else {
        d_out
    };

    let scalar_expr = g.per_row_scalar.as_ref().map(|s| {
        let d = &decls[s];
        params.add(s, tensor_dims(plan, s, d));
        let row = operand_row_expr(
            plan,
            &kid,
            &VarRef::new(s.clone(), Access::Edge),
            &mut params,
            &decls,
        );
        format!("{s}[{row}, 0]")
    });

    // Store target row expression per scatter kind.
    let store_row = match g.scatter {
        ScatterKind::Identity => row_var.to_string(),
        ScatterKind::NodeBySrc => format!("GetSrcId_{kid}({row_var})"),
        ScatterKind::NodeByDst => format!("GetDstId_{kid}({row_var})"),
        ScatterKind::WeightByEType => format!("GetEType_{kid}({row_var})"),
        ScatterKind::WeightByNType => {
            params.add("node_type", "u32[num_nodes]".into());
            format!("node_type[{row_var}]")
        }
        ScatterKind::WeightSingle => "0".to_string(),
    };

    let grid = format!("ceil_div({rows_sym}, {tile}), ceil_div({out_cols}, {tile})");
    let block = format!("{tile}, {}", tile / cf);

    let mut body = String::new();
    let _ = writeln!(body, "kernel {name}({}) {{", params.render());
    let _ = writeln!(body, "  launch grid({grid}) block({block});");
    let _ = writeln!(
        body,
        "  schedule template=gemm, tile_width={tile}, coarsen={cf}{};",
        match g.schedule.register_limit_hint {
            Some(r) => format!(", launch_bounds={r}"),
            None => String::new(),
        }
    );
    body.push_str(&row_iter_defs);
    let _ = writeln!(
        body,
        "  for tile_row in 0..ceil_div({rows_sym}, {tile}) {{"
    );
    let _ = writeln!(body, "    for tile_col in 0..ceil_div({out_cols}, {tile}) {{");
    let _ = writeln!(
        body,
        "      for {row_var} in tile_span(tile_row, {tile}, {rows_sym}) {{"
    );
    let _ = writeln!(
        body,
        "        for col in tile_span(tile_col, {tile}, {out_cols}) step {cf} {{"
    );
    if is_outer {
        // per-row outer product: out[i, j] = x[i] * y[j], flattened
        let y_cols = decls[&w.name].cols;
        for lane in 0..cf {
            let _ = writeln!(
                body,
                "          let i_{lane} = (col + {lane}) / {y_cols};"
            );
            let _ = writeln!(
                body,
                "          let j_{lane} = (col + {lane}) - i_{lane} * {y_cols};"
            );
            let _ = writeln!(
                body,
                "          let acc_{lane} = {x}[{x_row}, i_{lane}] * {w}[{w_row}, j_{lane}];",
                x = x.name,
                w = w.name,
            );
        }
    } else {
        for lane in 0..cf {
            let _ = writeln!(body, "          let acc_{lane} = 0.0;");
        }
        let _ = writeln!(
            body,
            "          for k_tile in 0..ceil_div({d_in}, {tile}) {{"
        );
        let _ = writeln!(
            body,
            "            let x_shmem = load_tile({}, {x_row}, k_tile, {tile});",
            x.name
        );
        let w_index = if g.transpose_weight {
            format!("transposed({}, {w_row})", w.name)
        } else {
            format!("{}, {w_row}", w.name)
        };
        let _ = writeln!(
            body,
            "            let w_shmem = load_tile({w_index}, k_tile, {tile});"
        );
        let _ = writeln!(body, "            sync;");
        for lane in 0..cf {
            let _ = writeln!(
                body,
                "            acc_{lane} += mac_tile(x_shmem, w_shmem, col + {lane}, {tile});"
            );
        }
        let _ = writeln!(body, "            sync;");
        let _ = writeln!(body, "          }}");
    }
    for lane in 0..cf {
        let value = match &scalar_expr {
            Some(s) => format!("acc_{lane} * {s}"),
            None => format!("acc_{lane}"),
        };
        if g.atomic_output {
            let _ = writeln!(
                body,
                "          atomic_add({}[{store_row}, col + {lane}], {value});",
                g.out_var
            );
        } else {
            let _ = writeln!(
                body,
                "          {}[{store_row}, col + {lane}] = {value};",
                g.out_var
            );
        }
    }
    let _ = writeln!(body, "        }}");
    let _ = writeln!(body, "      }}");
    let _ = writeln!(body, "    }}");
    let _ = writeln!(body, "  }}");
    let _ = writeln!(body, "}}");

    let operands = params.list.iter().map(|(n, _)| n.clone()).collect();
    (body, format!("grid({grid})"), format!("block({block})"), operands)
}

// ── traversal emission ────────────────────────────────────────────────

/// Which statements can share one feature loop: pointwise maps and
/// aggregations, all iterating the same width.
fn pointwise_width(
    op: &OpCall,
    decls: &BTreeMap<String, TensorDecl>,
) -> Option<usize> {
    match op.op {
        OpKind::Unary(_) | OpKind::Binary(_) => decls.get(&op.result.name).map(|d| d.cols),
        OpKind::AccumulateSum => decls.get(&op.args[0].name).map(|d| d.cols),
        _ => None,
    }
}

/// Render a traversal instance: accessor defs, then one loop over the
/// rows with each statement at its hoisted level: row-level scalars
/// once per row, vector statements inside feature loops, consecutive
/// pointwise vector statements fused into a single feature loop.
/// Internal temporaries consumed inside the instance become registers
/// (`let` bindings) instead of global tensors; aggregations store with
/// `atomic_add`, behind a warp-level partial reduction when scheduled.
pub fn emit_traversal(
    plan: &KernelPlan,
    t: &TraversalInstance,
    name: &str,
) -> (String, String, String, Vec<String>) {
    let decls = plan.program.infer_decls().expect("plan program validates");
    let kid = t.kid.to_string();
    let mut params = Params::new();
    let edge_domain = t.scope == ScopeKind::Edges;
    let (rows_sym, row_var) = if edge_domain {
        adjacency_params(t.adjacency, &mut params);
        ("num_edges", "e")
    } else {
        params.add("node_type", "u32[num_nodes]".into());
        ("num_nodes", "n")
    };

    // Segment the statements: runs of equal-width pointwise feature
    // statements share one loop, everything else stands alone.
    enum Seg {
        Single(usize),
        Fused(Vec<usize>, usize),
    }
    let mut segs: Vec<Seg> = Vec::new();
    for (i, stmt) in t.stmts.iter().enumerate() {
        let w = if stmt.hoist == HoistLevel::Feature {
            pointwise_width(&stmt.op, &decls)
        } else {
            None
        };
        match (w, segs.last_mut()) {
            (Some(w), Some(Seg::Fused(ids, gw))) if *gw == w => ids.push(i),
            (Some(w), _) => segs.push(Seg::Fused(vec![i], w)),
            (None, _) => segs.push(Seg::Single(i)),
        }
    }
    // group index of every statement
    let mut group_of = vec![usize::MAX; t.stmts.len()];
    for (gi, seg) in segs.iter().enumerate() {
        match seg {
            Seg::Single(i) => group_of[*i] = gi,
            Seg::Fused(ids, _) => {
                for &i in ids {
                    group_of[i] = gi;
                }
            }
        }
    }

    // Internal temporaries become registers when every use is row-local;
    // vector registers additionally live and die inside one fused loop.
    let row_local = |a: &VarRef| {
        (edge_domain && a.access == Access::Edge) || (!edge_domain && a.access == Access::Node)
    };
    let mut scalar_regs: BTreeSet<String> = BTreeSet::new();
    let mut vector_regs: BTreeSet<String> = BTreeSet::new();
    for (i, stmt) in t.stmts.iter().enumerate() {
        let nm = &stmt.op.result.name;
        if !t.internal.contains(nm) {
            continue;
        }
        let uses_ok = t.stmts.iter().all(|s| {
            s.op.args
                .iter()
                .filter(|a| &a.name == nm)
                .all(row_local)
        });
        if !uses_ok {
            continue;
        }
        let cols = decls[nm].cols;
        let defined_in_fused = matches!(segs[group_of[i]], Seg::Fused(..));
        if cols == 1 && !defined_in_fused {
            scalar_regs.insert(nm.clone());
        } else if defined_in_fused {
            // all consumers must sit in the same fused loop
            let same_group = t.stmts.iter().enumerate().all(|(j, s)| {
                !s.op.args.iter().any(|a| &a.name == nm) || group_of[j] == group_of[i]
            });
            if same_group {
                vector_regs.insert(nm.clone());
            }
        }
    }

    let max_cols = t
        .stmts
        .iter()
        .map(|s| decls.get(&s.op.result.name).map_or(1, |d| d.cols))
        .max()
        .unwrap_or(1);

    let mut body = String::new();
    let _ = writeln!(body, "kernel {name}(__params__) {{");
    let _ = writeln!(body, "  launch grid({rows_sym}) block(1, {max_cols});");
    let _ = writeln!(
        body,
        "  schedule template=traversal, partial_agg={};",
        t.partial_aggregation
    );
    if edge_domain {
        body.push_str(&accessor_defs(&kid, t.adjacency));
    }
    let _ = writeln!(body, "  for {row_var} in 0..{rows_sym} {{");

    let operand = |a: &VarRef, params: &mut Params, col: &str| -> String {
        if row_local(a) && scalar_regs.contains(&a.name) {
            return format!("{}_r", a.name);
        }
        if row_local(a) && vector_regs.contains(&a.name) {
            return format!("{}_f", a.name);
        }
        let d = &decls[&a.name];
        let row = if edge_domain {
            operand_row_expr(plan, &kid, a, params, &decls)
        } else {
            match a.access {
                Access::Node => "n".to_string(),
                Access::NType => "node_type[n]".to_string(),
                Access::SingleType => "0".to_string(),
                _ => operand_row_expr(plan, &kid, a, params, &decls),
            }
        };
        params.add(&a.name, tensor_dims(plan, &a.name, d));
        if a.access.is_type_select() {
            format!("{}[{row}, 0, {col}]", a.name)
        } else if d.cols == 1 {
            format!("{}[{row}, 0]", a.name)
        } else {
            format!("{}[{row}, {col}]", a.name)
        }
    };

    let mut tmp = 0usize;
    for seg in &segs {
        let ids: Vec<usize> = match seg {
            Seg::Single(i) => vec![*i],
            Seg::Fused(ids, _) => ids.clone(),
        };
        let fused_loop = matches!(seg, Seg::Fused(..));
        if fused_loop {
            let Seg::Fused(_, w) = seg else { unreachable!() };
            let _ = writeln!(body, "    for f in 0..{w} {{");
        }
        for &i in &ids {
            let stmt = &t.stmts[i];
            let op = &stmt.op;
            let res_decl = &decls[&op.result.name];
            let result_store = |params: &mut Params| -> String {
                params.add(&op.result.name, tensor_dims(plan, &op.result.name, res_decl));
                if edge_domain {
                    operand_row_expr(
                        plan,
                        &kid,
                        &VarRef::new(op.result.name.clone(), Access::Edge),
                        params,
                        &decls,
                    )
                } else {
                    "n".to_string()
                }
            };
            match (&op.op, stmt.hoist, fused_loop) {
                (OpKind::DotProd, _, false) => {
                    let _ = writeln!(body, "    let acc_{tmp} = 0.0;");
                    let width = decls[&op.args[0].name]
                        .cols
                        .max(decls[&op.args[1].name].cols);
                    let _ = writeln!(body, "    for f in 0..{width} {{");
                    let a0 = operand(&op.args[0], &mut params, "f");
                    let a1 = operand(&op.args[1], &mut params, "f");
                    let _ = writeln!(body, "      acc_{tmp} += {a0} * {a1};");
                    let _ = writeln!(body, "    }}");
                    if scalar_regs.contains(&op.result.name) {
                        let _ = writeln!(body, "    let {}_r = acc_{tmp};", op.result.name);
                    } else {
                        let row = result_store(&mut params);
                        let _ = writeln!(body, "    {}[{row}, 0] = acc_{tmp};", op.result.name);
                    }
                    tmp += 1;
                }
                (OpKind::AccumulateSum, _, in_fused) => {
                    let target_row = match op.result.access {
                        Access::Src => format!("GetSrcId_{kid}({row_var})"),
                        Access::Dst => format!("GetDstId_{kid}({row_var})"),
                        Access::EType => format!("GetEType_{kid}({row_var})"),
                        Access::NType => "node_type[n]".to_string(),
                        Access::SingleType => "0".to_string(),
                        _ => row_var.to_string(),
                    };
                    params.add(&op.result.name, tensor_dims(plan, &op.result.name, res_decl));
                    let store = |col: &str| -> String {
                        if res_decl.role.is_weight() {
                            format!("{}[{target_row}, 0, {col}]", op.result.name)
                        } else if res_decl.cols == 1 {
                            format!("{}[{target_row}, 0]", op.result.name)
                        } else {
                            format!("{}[{target_row}, {col}]", op.result.name)
                        }
                    };
                    let arg_cols = decls[&op.args[0].name].cols;
                    let wrap = |a: String| {
                        if t.partial_aggregation {
                            format!("warp_reduce({a})")
                        } else {
                            a
                        }
                    };
                    if in_fused {
                        let a = operand(&op.args[0], &mut params, "f");
                        let col = if arg_cols == 1 { "0" } else { "f" };
                        let _ = writeln!(body, "      atomic_add({}, {});", store(col), wrap(a));
                    } else if arg_cols == 1 {
                        let a = operand(&op.args[0], &mut params, "0");
                        let _ = writeln!(body, "    atomic_add({}, {});", store("0"), wrap(a));
                    } else {
                        let _ = writeln!(body, "    for f in 0..{arg_cols} {{");
                        let a = operand(&op.args[0], &mut params, "f");
                        let _ = writeln!(body, "      atomic_add({}, {});", store("f"), wrap(a));
                        let _ = writeln!(body, "    }}");
                    }
                }
                (OpKind::RowwiseMatVec { rows, cols: rc, transpose }, _, false) => {
                    let (out_n, in_n) = if *transpose { (*rc, *rows) } else { (*rows, *rc) };
                    let _ = writeln!(body, "    for i in 0..{out_n} {{");
                    let _ = writeln!(body, "      let acc_{tmp} = 0.0;");
                    let _ = writeln!(body, "      for j in 0..{in_n} {{");
                    let flat = if *transpose {
                        format!("j * {rc} + i")
                    } else {
                        format!("i * {rc} + j")
                    };
                    let m = operand(&op.args[0], &mut params, &flat);
                    let v = operand(&op.args[1], &mut params, "j");
                    let _ = writeln!(body, "        acc_{tmp} += {m} * {v};");
                    let _ = writeln!(body, "      }}");
                    let row = result_store(&mut params);
                    let _ = writeln!(body, "      {}[{row}, i] = acc_{tmp};", op.result.name);
                    let _ = writeln!(body, "    }}");
                    tmp += 1;
                }
                (_, HoistLevel::Row, false) => {
                    let expr = scalar_stmt_expr(op, &mut params, &operand);
                    if scalar_regs.contains(&op.result.name) {
                        let _ = writeln!(body, "    let {}_r = {expr};", op.result.name);
                    } else {
                        let row = result_store(&mut params);
                        let _ = writeln!(body, "    {}[{row}, 0] = {expr};", op.result.name);
                    }
                }
                (_, _, true) => {
                    let expr = vector_stmt_expr(op, &mut params, &operand);
                    if vector_regs.contains(&op.result.name) {
                        let _ = writeln!(body, "      let {}_f = {expr};", op.result.name);
                    } else {
                        let row = result_store(&mut params);
                        let col = if res_decl.cols == 1 { "0" } else { "f" };
                        let _ = writeln!(body, "      {}[{row}, {col}] = {expr};", op.result.name);
                    }
                }
                (_, HoistLevel::Feature, false) => {
                    let cols = res_decl.cols;
                    let _ = writeln!(body, "    for f in 0..{cols} {{");
                    let expr = vector_stmt_expr(op, &mut params, &operand);
                    let row = result_store(&mut params);
                    let _ = writeln!(body, "      {}[{row}, f] = {expr};", op.result.name);
                    let _ = writeln!(body, "    }}");
                }
            }
        }
        if fused_loop {
            let _ = writeln!(body, "    }}");
        }
    }
    let _ = writeln!(body, "  }}");
    let _ = writeln!(body, "}}");

    let text = body.replace("__params__", &params.render());
    let operands = params.list.iter().map(|(n, _)| n.clone()).collect();
    (
        text,
        format!("grid({rows_sym})"),
        format!("block(1, {max_cols})"),
        operands,
    )
}

fn scalar_stmt_expr(
    op: &OpCall,
    params: &mut Params,
    operand: &dyn Fn(&VarRef, &mut Params, &str) -> String,
) -> String {
    stmt_expr(op, params, operand, "0")
}

fn vector_stmt_expr(
    op: &OpCall,
    params: &mut Params,
    operand: &dyn Fn(&VarRef, &mut Params, &str) -> String,
) -> String {
    stmt_expr(op, params, operand, "f")
}

fn stmt_expr(
    op: &OpCall,
    params: &mut Params,
    operand: &dyn Fn(&VarRef, &mut Params, &str) -> String,
    col: &str,
) -> String {
    match &op.op {
        OpKind::Unary(UnaryKind::Identity) => operand(&op.args[0], params, col),
        OpKind::Unary(UnaryKind::Exp) => format!("exp({})", operand(&op.args[0], params, col)),
        OpKind::Unary(UnaryKind::LeakyRelu { slope }) => {
            format!("leakyrelu({}, {slope})", operand(&op.args[0], params, col))
        }
        OpKind::Unary(UnaryKind::LeakyReluGrad { slope }) => {
            format!(
                "leakyrelu_grad({}, {slope})",
                operand(&op.args[0], params, col)
            )
        }
        OpKind::Unary(UnaryKind::Scale(c)) => {
            format!("{c} * {}", operand(&op.args[0], params, col))
        }
        OpKind::Binary(k) => {
            let a = operand(&op.args[0], params, col);
            let b = operand(&op.args[1], params, col);
            let sym = match k {
                crate::ir::BinaryKind::Add => "+",
                crate::ir::BinaryKind::Sub => "-",
                crate::ir::BinaryKind::Mul => "*",
                crate::ir::BinaryKind::Div => "/",
            };
            format!("{a} {sym} {b}")
        }
        OpKind::Concat => {
            // concatenation renders as a guarded select over column ranges
            let parts: Vec<String> = op
                .args
                .iter()
                .map(|a| operand(a, params, col))
                .collect();
            format!("concat_select({col}, {})", parts.join(", "))
        }
        OpKind::SliceCols { from, .. } => {
            operand(&op.args[0], params, &format!("{col} + {from}"))
        }
        other => panic!("{} has no traversal rendering", other.label()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DimsConfig;
    use crate::kernel::{GemmSchedule, Layout};
    use crate::lower::{lower, LowerOptions};
    use crate::zoo::{build_rgat, ModelOptions};

    fn rgat_plan(layout: Layout, adjacency: Adjacency) -> KernelPlan {
        let dims = DimsConfig::new(8, 8, 2, 2);
        let p = build_rgat(&dims, &ModelOptions::default());
        lower(
            &p,
            LowerOptions {
                layout,
                adjacency,
                schedule: GemmSchedule::default(),
            },
        )
    }

    #[test]
    fn emission_is_deterministic() {
        let plan = rgat_plan(Layout::Compact, Adjacency::Csr);
        let a = emit_plan(&plan, None);
        let b = emit_plan(&plan, None);
        assert_eq!(a.manifest_json(), b.manifest_json());
        assert_eq!(a.kernels, b.kernels);
    }

    #[test]
    fn compact_gemm_mentions_unique_index_arrays() {
        let plan = rgat_plan(Layout::Compact, Adjacency::Coo);
        let art = emit_plan(&plan, None);
        let gemm = &art
            .kernels
            .iter()
            .find(|(n, _)| n.starts_with("gemm_0"))
            .unwrap()
            .1;
        assert!(gemm.contains("unique_row_idx"));
        assert!(gemm.contains("unique_etype_ptr"));
        assert!(gemm.contains("num_pairs"));
    }

    #[test]
    fn csr_traversal_uses_binary_search() {
        let plan = rgat_plan(Layout::Vanilla, Adjacency::Csr);
        let art = emit_plan(&plan, None);
        let trav = art
            .kernels
            .iter()
            .find(|(n, _)| n.starts_with("traversal"))
            .unwrap();
        assert!(trav.1.contains("binary_search(row_ptr, e)"));
    }

    #[test]
    fn coarsening_halves_thread_extent() {
        let dims = DimsConfig::new(8, 8, 2, 2);
        let p = build_rgat(&dims, &ModelOptions::default());
        let plan = lower(
            &p,
            LowerOptions {
                layout: Layout::Vanilla,
                adjacency: Adjacency::Coo,
                schedule: GemmSchedule {
                    tile_width: 16,
                    coarsening_factor: 2,
                    register_limit_hint: None,
                },
            },
        );
        let art = emit_plan(&plan, None);
        let gemm = &art
            .kernels
            .iter()
            .find(|(n, _)| n.starts_with("gemm_0"))
            .unwrap()
            .1;
        assert!(gemm.contains("block(16, 8)"));
        assert!(gemm.contains("acc_1"));
        assert!(gemm.contains("col + 1"));
    }

    #[test]
    fn nodewise_gemm_elides_the_gather() {
        use crate::zoo::build_rgcn;
        let dims = DimsConfig::new(8, 8, 2, 2);
        let p = build_rgcn(&dims, &ModelOptions::default());
        let plan = lower(&p, LowerOptions::default());
        let art = emit_plan(&plan, None);
        // the self-loop term is a node-domain segment multiply: rows are
        // already contiguous per type, so no gather array appears
        let selfh = &art
            .kernels
            .iter()
            .find(|(_, text)| text.contains("selfh"))
            .expect("self-loop kernel")
            .1;
        assert!(!selfh.contains("row_idx"));
        assert!(selfh.contains("num_nodes"));
    }

    #[test]
    fn partial_aggregation_is_text_only() {
        let plan = rgat_plan(Layout::Vanilla, Adjacency::Coo);
        let mut no_partial = plan.clone();
        for t in &mut no_partial.traversals {
            t.partial_aggregation = false;
        }
        let with = emit_plan(&plan, None);
        let without = emit_plan(&no_partial, None);
        let text_with = with
            .kernels
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<String>();
        let text_without = without
            .kernels
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<String>();
        assert!(text_with.contains("warp_reduce"));
        assert!(!text_without.contains("warp_reduce"));
    }

    #[test]
    fn preprocessing_rules() {
        let compact = rgat_plan(Layout::Compact, Adjacency::Coo);
        let steps = collect_preprocessing(&compact);
        assert_eq!(
            steps,
            vec![
                PreprocessingStep::SortEdgesByType,
                PreprocessingStep::BuildCompactIndex
            ]
        );
        let vanilla = rgat_plan(Layout::Vanilla, Adjacency::Coo);
        assert_eq!(
            collect_preprocessing(&vanilla),
            vec![PreprocessingStep::SortEdgesByType]
        );
        let csr = rgat_plan(Layout::Vanilla, Adjacency::Csr);
        assert_eq!(
            collect_preprocessing(&csr),
            vec![
                PreprocessingStep::SortEdgesByType,
                PreprocessingStep::CooToCsr
            ]
        );
    }

    #[test]
    fn empty_plan_empty_preprocessing() {
        let mut b = crate::ir::ProgramBuilder::new("empty");
        b.input(crate::ir::TensorDecl::edge("x", 1));
        b.output("x");
        let plan = lower(&b.finish(), LowerOptions::default());
        assert!(collect_preprocessing(&plan).is_empty());
        let art = emit_plan(&plan, None);
        assert!(art.manifest.kernels.is_empty());
    }
}
