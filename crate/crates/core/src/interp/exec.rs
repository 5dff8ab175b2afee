//! Program and plan execution.

use std::collections::BTreeMap;

use super::{Environment, ExecError};
use crate::ir::{
    Access, BinaryKind, OpCall, OpKind, Program, Role, ScopeKind, Stmt, TensorDecl, UnaryKind,
    VarRef, WwKind,
};
use crate::kernel::{Adjacency, Materialization, RowDomain, ScatterKind};
use crate::lower::{ExecUnit, KernelPlan};
use crate::tensor::{fill_rows, map_indices, ExecMode, TensorValue, ValueRole};

/// Execute a layer program, returning the environment extended with every
/// value the program defines. Reductions run in ascending edge order.
pub fn run_forward(p: &Program, env: &Environment) -> Result<Environment, ExecError> {
    run_forward_mode(p, env, env.mode)
}

pub fn run_forward_mode(
    p: &Program,
    env: &Environment,
    mode: ExecMode,
) -> Result<Environment, ExecError> {
    let mut env = env.clone();
    env.mode = mode;
    let decls = p
        .infer_decls()
        .map_err(|e| ExecError::Invalid(e.to_string()))?;
    let mat = default_materialization(&decls);
    let mut exec = Exec {
        env: &mut env,
        decls,
        mat,
        adjacency: Adjacency::Coo,
    };
    exec.check_inputs(p)?;
    exec.zero_accumulators(p)?;
    for s in &p.stmts {
        exec.run_stmt(s)?;
    }
    for out in &p.outputs {
        env.get(out)?.assert_finite(out).map_err(|_| {
            ExecError::NonFinite(out.clone())
        })?;
    }
    Ok(env)
}

/// Execute a lowered plan. The environment must already carry the
/// preprocessing the plan requires (type-sorted graph, CSR, compact
/// index); outputs equal `run_forward` of the plan's program.
pub fn run_plan(plan: &KernelPlan, env: &Environment) -> Result<Environment, ExecError> {
    run_plan_mode(plan, env, env.mode)
}

pub fn run_plan_mode(
    plan: &KernelPlan,
    env: &Environment,
    mode: ExecMode,
) -> Result<Environment, ExecError> {
    let mut env = env.clone();
    env.mode = mode;
    if !env.graph.is_type_sorted() {
        return Err(ExecError::MissingPreprocessing("sort_edges_by_type"));
    }
    if plan.adjacency == Adjacency::Csr && env.csr.is_none() {
        return Err(ExecError::MissingPreprocessing("coo_to_csr"));
    }
    let uses_compact = plan
        .materialization
        .values()
        .any(|m| *m == Materialization::CompactPair);
    if uses_compact && env.compact.is_none() {
        return Err(ExecError::MissingPreprocessing("build_compact_index"));
    }

    let p = &plan.program;
    let decls = p
        .infer_decls()
        .map_err(|e| ExecError::Invalid(e.to_string()))?;
    let mut exec = Exec {
        env: &mut env,
        decls,
        mat: plan.materialization.clone(),
        adjacency: plan.adjacency,
    };
    exec.check_inputs(p)?;
    exec.zero_accumulators(p)?;

    for unit in &plan.order {
        match unit {
            ExecUnit::Gemm(i) => exec.run_gemm(&plan.gemms[*i])?,
            ExecUnit::Traversal(i) => {
                let t = &plan.traversals[*i];
                for stmt in &t.stmts {
                    exec.run_scoped_op(&stmt.op, t.scope)?;
                }
            }
            ExecUnit::Fallback(i) => {
                let f = &plan.fallback[*i];
                match f.scope {
                    None => exec.run_top_op(&f.op)?,
                    // An op left inside a non-canonicalized neighbor nest
                    // is still a for-each over the edges with the node
                    // rebound to the matching endpoint.
                    Some(ScopeKind::IncomingEdges) => {
                        exec.run_scoped_op(&rebind(&f.op, Access::Dst), ScopeKind::Edges)?
                    }
                    Some(ScopeKind::OutgoingEdges) => {
                        exec.run_scoped_op(&rebind(&f.op, Access::Src), ScopeKind::Edges)?
                    }
                    Some(kind) => exec.run_scoped_op(&f.op, kind)?,
                }
            }
        }
    }

    // Declared outputs materialized compactly expand back to one row per
    // edge so they compare directly against the source program.
    for out in &p.outputs {
        if exec.mat.get(out) == Some(&Materialization::CompactPair) {
            let expanded = exec.expand_compact(out)?;
            exec.env.bindings.insert(out.clone(), expanded);
        }
    }
    for out in &p.outputs {
        env.get(out)?
            .assert_finite(out)
            .map_err(|_| ExecError::NonFinite(out.clone()))?;
    }
    Ok(env)
}

fn default_materialization(decls: &BTreeMap<String, TensorDecl>) -> BTreeMap<String, Materialization> {
    decls
        .iter()
        .map(|(n, d)| {
            let m = match d.role {
                Role::Node { .. } => Materialization::Node,
                Role::Edge => Materialization::Edge,
                _ => Materialization::Weight,
            };
            (n.clone(), m)
        })
        .collect()
}

/// A row-view of an operand: `rows x cols` of contiguous data.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> View<'a> {
    fn width(&self) -> usize {
        self.rows * self.cols
    }
}

struct Exec<'a> {
    env: &'a mut Environment,
    decls: BTreeMap<String, TensorDecl>,
    mat: BTreeMap<String, Materialization>,
    adjacency: Adjacency,
}

impl<'a> Exec<'a> {
    fn graph(&self) -> &crate::graph::HeteroGraph {
        &self.env.graph
    }

    fn check_inputs(&self, p: &Program) -> Result<(), ExecError> {
        let g = self.graph();
        for d in &p.inputs {
            let t = self.env.get(&d.name)?;
            let want_rows = match d.role {
                Role::Node { ntype: None } => g.num_nodes(),
                Role::Node { ntype: Some(nt) } => g.node_counts()[nt],
                Role::Edge => g.num_edges(),
                Role::WeightEType { types } | Role::WeightNType { types } => {
                    types * d.slice_rows
                }
                Role::WeightSingle => d.slice_rows,
            };
            if t.rows() != want_rows || t.cols() != d.cols {
                return Err(ExecError::Shape {
                    name: d.name.clone(),
                    expected: format!("{want_rows}x{}", d.cols),
                    got: format!("{}x{}", t.rows(), t.cols()),
                });
            }
        }
        Ok(())
    }

    fn zero_accumulators(&mut self, p: &Program) -> Result<(), ExecError> {
        let g = self.graph();
        let n_nodes = g.num_nodes();
        let mut zeroed: Vec<(String, TensorValue)> = Vec::new();
        p.visit_ops(|_, _, op| {
            if op.op != OpKind::AccumulateSum {
                return;
            }
            let name = &op.result.name;
            if zeroed.iter().any(|(n, _)| n == name) {
                return;
            }
            let d = &self.decls[name];
            let t = match d.role {
                Role::Node { .. } => TensorValue::zeros(n_nodes, d.cols, ValueRole::Node),
                Role::WeightEType { types } | Role::WeightNType { types } => TensorValue::zeros(
                    types * d.slice_rows,
                    d.cols,
                    ValueRole::Weight {
                        types,
                        slice_rows: d.slice_rows,
                    },
                ),
                Role::WeightSingle => TensorValue::zeros(
                    d.slice_rows,
                    d.cols,
                    ValueRole::Weight {
                        types: 1,
                        slice_rows: d.slice_rows,
                    },
                ),
                Role::Edge => TensorValue::zeros(g.num_edges(), d.cols, ValueRole::Edge),
            };
            zeroed.push((name.clone(), t));
        });
        for (n, t) in zeroed {
            self.env.bindings.insert(n, t);
        }
        Ok(())
    }

    fn run_stmt(&mut self, s: &Stmt) -> Result<(), ExecError> {
        match s {
            Stmt::Op(op) => self.run_top_op(op),
            Stmt::Scope(sc) => match sc.kind {
                ScopeKind::Edges => {
                    for st in &sc.body {
                        let Stmt::Op(op) = st else {
                            return Err(ExecError::Invalid("edge scopes hold ops only".into()));
                        };
                        self.run_scoped_op(op, ScopeKind::Edges)?;
                    }
                    Ok(())
                }
                ScopeKind::DstNodes | ScopeKind::SrcNodes => {
                    for st in &sc.body {
                        match st {
                            Stmt::Op(op) => self.run_scoped_op(op, sc.kind)?,
                            // A neighbor nest is a for-each over the edges
                            // with the node rebound to the matching endpoint.
                            Stmt::Scope(nb) => {
                                let endpoint = match nb.kind {
                                    ScopeKind::IncomingEdges => Access::Dst,
                                    ScopeKind::OutgoingEdges => Access::Src,
                                    _ => {
                                        return Err(ExecError::Invalid(
                                            "node scopes nest neighbor scopes only".into(),
                                        ))
                                    }
                                };
                                for inner in &nb.body {
                                    let Stmt::Op(op) = inner else {
                                        return Err(ExecError::Invalid(
                                            "neighbor scopes hold ops only".into(),
                                        ));
                                    };
                                    let rebound = rebind(op, endpoint);
                                    self.run_scoped_op(&rebound, ScopeKind::Edges)?;
                                }
                            }
                        }
                    }
                    Ok(())
                }
                _ => Err(ExecError::Invalid(
                    "neighbor scope outside node scope".into(),
                )),
            },
        }
    }

    // ── operand resolution ──────────────────────────────────────────────

    fn view_of(&self, name: &str) -> Result<(&TensorValue, Materialization), ExecError> {
        let t = self.env.get(name)?;
        let m = *self.mat.get(name).unwrap_or(&Materialization::Edge);
        Ok((t, m))
    }

    /// Resolve an operand for row `r` of a domain. `ids` carries the
    /// edge/node/pair identity of the row.
    fn arg_view<'b>(
        &'b self,
        a: &VarRef,
        ids: &RowIds,
    ) -> Result<View<'b>, ExecError> {
        let (t, m) = self.view_of(&a.name)?;
        let g = self.graph();
        let row_view = |row: usize| View {
            data: t.row(row),
            rows: 1,
            cols: t.cols(),
        };
        let slice_view = |ty: usize| {
            let d = &self.decls[&a.name];
            View {
                data: t.weight_slice(ty),
                rows: d.slice_rows,
                cols: d.cols,
            }
        };
        Ok(match a.access {
            Access::Plain => View {
                data: t.data(),
                rows: t.rows(),
                cols: t.cols(),
            },
            Access::Src => row_view(ids.src.expect("src outside edge domain")),
            Access::Dst => row_view(ids.dst.expect("dst outside edge domain")),
            Access::Edge => {
                let row = match m {
                    Materialization::CompactPair => ids
                        .pair
                        .expect("compact operand outside pair-indexed domain"),
                    _ => ids.edge.expect("edge operand outside edge domain"),
                };
                row_view(row)
            }
            Access::EType => slice_view(ids.etype.expect("etype outside edge domain")),
            Access::SrcNType => {
                slice_view(g.node_type_of(ids.src.expect("src outside edge domain")))
            }
            Access::DstNType => {
                slice_view(g.node_type_of(ids.dst.expect("dst outside edge domain")))
            }
            Access::Node => row_view(ids.node.expect("node outside node domain")),
            Access::NType => {
                slice_view(g.node_type_of(ids.node.expect("node outside node domain")))
            }
            Access::SingleType => slice_view(0),
        })
    }

    // ── scoped (edge/node domain) execution ─────────────────────────────

    fn run_scoped_op(&mut self, op: &OpCall, scope: ScopeKind) -> Result<(), ExecError> {
        match scope {
            ScopeKind::Edges => {
                if op.op == OpKind::AccumulateSum {
                    self.accumulate_from_edges(op)
                } else {
                    self.rowwise_edges(op)
                }
            }
            ScopeKind::DstNodes | ScopeKind::SrcNodes => {
                if op.op == OpKind::AccumulateSum {
                    self.accumulate_from_nodes(op)
                } else {
                    self.rowwise_nodes(op)
                }
            }
            _ => Err(ExecError::Invalid("cannot execute neighbor scope".into())),
        }
    }

    fn row_ids_edge(&self, e: usize) -> RowIds {
        let g = self.graph();
        RowIds {
            edge: Some(e),
            src: Some(g.src(e)),
            dst: Some(g.dst(e)),
            etype: Some(g.etype(e)),
            pair: self.env.compact.as_ref().map(|ci| ci.pair_of_edge[e]),
            node: None,
        }
    }

    fn rowwise_edges(&mut self, op: &OpCall) -> Result<(), ExecError> {
        let e_count = self.graph().num_edges();
        let cols = self.result_cols(op)?;
        let mut out = vec![0.0; e_count * cols];
        let this = &*self;
        let err = std::sync::Mutex::new(None::<ExecError>);
        fill_rows(self.env.mode, &mut out, cols, |e, row| {
            let ids = this.row_ids_edge(e);
            if let Err(x) = this.eval_row(op, &ids, row) {
                *err.lock().unwrap() = Some(x);
            }
        });
        if let Some(x) = err.into_inner().unwrap() {
            return Err(x);
        }
        self.env.bindings.insert(
            op.result.name.clone(),
            TensorValue::from_flat(e_count, cols, out, ValueRole::Edge),
        );
        Ok(())
    }

    fn rowwise_nodes(&mut self, op: &OpCall) -> Result<(), ExecError> {
        let n = self.graph().num_nodes();
        let cols = self.result_cols(op)?;
        let mut out = vec![0.0; n * cols];
        let this = &*self;
        let err = std::sync::Mutex::new(None::<ExecError>);
        fill_rows(self.env.mode, &mut out, cols, |v, row| {
            let ids = RowIds {
                node: Some(v),
                ..RowIds::default()
            };
            if let Err(x) = this.eval_row(op, &ids, row) {
                *err.lock().unwrap() = Some(x);
            }
        });
        if let Some(x) = err.into_inner().unwrap() {
            return Err(x);
        }
        self.env.bindings.insert(
            op.result.name.clone(),
            TensorValue::from_flat(n, cols, out, ValueRole::Node),
        );
        Ok(())
    }

    fn result_cols(&self, op: &OpCall) -> Result<usize, ExecError> {
        self.decls
            .get(&op.result.name)
            .map(|d| d.cols)
            .ok_or_else(|| ExecError::Invalid(format!("no decl for {}", op.result.name)))
    }

    /// Contribution rows for an edge-scope accumulation, then a
    /// deterministic grouped scatter-add.
    fn accumulate_from_edges(&mut self, op: &OpCall) -> Result<(), ExecError> {
        let e_count = self.graph().num_edges();
        let arg = &op.args[0];
        // Width of one contribution row.
        let width = {
            let (t, _) = self.view_of(&arg.name)?;
            t.cols()
        };
        let mut contrib = vec![0.0; e_count * width];
        let this = &*self;
        let err = std::sync::Mutex::new(None::<ExecError>);
        fill_rows(self.env.mode, &mut contrib, width, |e, row| {
            let ids = this.row_ids_edge(e);
            match this.arg_view(arg, &ids) {
                Ok(v) => row.copy_from_slice(v.data),
                Err(x) => *err.lock().unwrap() = Some(x),
            }
        });
        if let Some(x) = err.into_inner().unwrap() {
            return Err(x);
        }

        // Iteration positions: ascending edge id under COO, CSR entry
        // order under CSR (the kernel walks row segments).
        let positions: Vec<usize> = match (self.adjacency, &self.env.csr) {
            (Adjacency::Csr, Some(csr)) => csr.entry_of_edge(),
            _ => (0..e_count).collect(),
        };

        let (group_count, groups): (usize, Vec<Vec<usize>>) = {
            let g = self.graph();
            let (count, target_of): (usize, Vec<usize>) = match op.result.access {
                Access::Src => (g.num_nodes(), (0..e_count).map(|e| g.src(e)).collect()),
                Access::Dst => (g.num_nodes(), (0..e_count).map(|e| g.dst(e)).collect()),
                Access::EType => (
                    g.num_edge_types(),
                    (0..e_count).map(|e| g.etype(e)).collect(),
                ),
                Access::SingleType => (1, vec![0; e_count]),
                _ => return Err(ExecError::Invalid("bad accumulation target".into())),
            };
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); count];
            for e in 0..e_count {
                groups[target_of[e]].push(e);
            }
            for grp in &mut groups {
                grp.sort_by_key(|&e| positions[e]);
            }
            (count, groups)
        };

        let target = op.result.name.clone();
        let mut tensor = self
            .env
            .bindings
            .remove(&target)
            .ok_or_else(|| ExecError::MissingBinding(target.clone()))?;
        let is_weight = matches!(tensor.role(), ValueRole::Weight { .. });
        let slice_rows = match tensor.role() {
            ValueRole::Weight { slice_rows, .. } => slice_rows,
            _ => 1,
        };
        let t_cols = tensor.cols();
        // Sum each group's contributions in iteration order; groups are
        // disjoint so this parallelizes without changing any result.
        let sums: Vec<Option<Vec<f64>>> = map_indices(self.env.mode, group_count, |gi| {
            let grp = &groups[gi];
            if grp.is_empty() {
                return None;
            }
            let mut acc = vec![0.0; width];
            for &e in grp {
                for (a, v) in acc.iter_mut().zip(&contrib[e * width..(e + 1) * width]) {
                    *a += v;
                }
            }
            Some(acc)
        });
        for (gi, sum) in sums.into_iter().enumerate() {
            let Some(sum) = sum else { continue };
            let base = if is_weight { gi * slice_rows * t_cols } else { gi * t_cols };
            for (k, v) in sum.into_iter().enumerate() {
                tensor.data_mut()[base + k] += v;
            }
        }
        self.env.bindings.insert(target, tensor);
        Ok(())
    }

    /// Node-scope accumulation (per-node-type weight gradients).
    fn accumulate_from_nodes(&mut self, op: &OpCall) -> Result<(), ExecError> {
        let n = self.graph().num_nodes();
        let arg = &op.args[0];
        let width = {
            let (t, _) = self.view_of(&arg.name)?;
            t.cols()
        };
        let mut contrib = vec![0.0; n * width];
        let this = &*self;
        let err = std::sync::Mutex::new(None::<ExecError>);
        fill_rows(self.env.mode, &mut contrib, width, |v, row| {
            let ids = RowIds {
                node: Some(v),
                ..RowIds::default()
            };
            match this.arg_view(arg, &ids) {
                Ok(view) => row.copy_from_slice(view.data),
                Err(x) => *err.lock().unwrap() = Some(x),
            }
        });
        if let Some(x) = err.into_inner().unwrap() {
            return Err(x);
        }
        let target_of: Vec<usize> = {
            let g = self.graph();
            match op.result.access {
                Access::NType => (0..n).map(|v| g.node_type_of(v)).collect(),
                Access::SingleType => vec![0; n],
                _ => return Err(ExecError::Invalid("bad accumulation target".into())),
            }
        };
        let target = op.result.name.clone();
        let mut tensor = self
            .env
            .bindings
            .remove(&target)
            .ok_or_else(|| ExecError::MissingBinding(target.clone()))?;
        let slice_rows = match tensor.role() {
            ValueRole::Weight { slice_rows, .. } => slice_rows,
            _ => 1,
        };
        let t_cols = tensor.cols();
        for v in 0..n {
            let base = target_of[v] * slice_rows * t_cols;
            for k in 0..width {
                tensor.data_mut()[base + k] += contrib[v * width + k];
            }
        }
        self.env.bindings.insert(target, tensor);
        Ok(())
    }

    // ── per-row evaluation ──────────────────────────────────────────────

    fn eval_row(&self, op: &OpCall, ids: &RowIds, out: &mut [f64]) -> Result<(), ExecError> {
        let a = |i: usize| self.arg_view(&op.args[i], ids);
        match &op.op {
            OpKind::TypedLinear { transpose_weight } => {
                let x = a(0)?;
                let w = a(1)?;
                out.fill(0.0);
                if *transpose_weight {
                    crate::tensor::vec_mat_t_accum(x.data, w.data, w.cols, out);
                } else {
                    crate::tensor::vec_mat_accum(x.data, w.data, w.cols, out);
                }
            }
            OpKind::OuterProd => {
                let x = a(0)?;
                let y = a(1)?;
                let n = y.width();
                for (i, &xv) in x.data.iter().enumerate() {
                    for (j, &yv) in y.data.iter().enumerate() {
                        out[i * n + j] = xv * yv;
                    }
                }
            }
            OpKind::DotProd => {
                let x = a(0)?;
                let y = a(1)?;
                out[0] = crate::tensor::dot(x.data, y.data);
            }
            OpKind::Unary(k) => {
                let x = a(0)?;
                apply_unary(*k, x.data, out);
            }
            OpKind::Binary(k) => {
                let x = a(0)?;
                let y = a(1)?;
                apply_binary(*k, x.data, y.data, out);
            }
            OpKind::RowwiseMatVec {
                rows,
                cols,
                transpose,
            } => {
                let m = a(0)?;
                let v = a(1)?;
                if *transpose {
                    for j in 0..*cols {
                        let mut acc = 0.0;
                        for i in 0..*rows {
                            acc += m.data[i * cols + j] * v.data[i];
                        }
                        out[j] = acc;
                    }
                } else {
                    for i in 0..*rows {
                        let mut acc = 0.0;
                        for j in 0..*cols {
                            acc += m.data[i * cols + j] * v.data[j];
                        }
                        out[i] = acc;
                    }
                }
            }
            OpKind::Concat => {
                let mut off = 0;
                for i in 0..op.args.len() {
                    let x = a(i)?;
                    out[off..off + x.width()].copy_from_slice(x.data);
                    off += x.width();
                }
            }
            OpKind::SliceCols { from, to } => {
                let x = a(0)?;
                out.copy_from_slice(&x.data[*from..*to]);
            }
            OpKind::AccumulateSum
            | OpKind::Reshape { .. }
            | OpKind::WeightWeightProduct(_) => {
                return Err(ExecError::Invalid(format!(
                    "{} cannot run rowwise",
                    op.op.label()
                )))
            }
        }
        Ok(())
    }

    // ── top-level (whole tensor) execution ──────────────────────────────

    fn run_top_op(&mut self, op: &OpCall) -> Result<(), ExecError> {
        let result = match &op.op {
            OpKind::WeightWeightProduct(kind) => {
                let a = self.env.get(&op.args[0].name)?.clone();
                let b = self.env.get(&op.args[1].name)?.clone();
                let (ValueRole::Weight { types, slice_rows: sa }, ValueRole::Weight { .. }) =
                    (a.role(), b.role())
                else {
                    return Err(ExecError::Invalid("ww operands must be weights".into()));
                };
                let (out_sr, out_cols) = match kind {
                    WwKind::MatVec => (1, sa),
                    WwKind::VecMat => (1, a.cols()),
                    WwKind::VecOuter => (a.cols(), b.cols()),
                };
                let mut out = TensorValue::zeros(
                    types * out_sr,
                    out_cols,
                    ValueRole::Weight {
                        types,
                        slice_rows: out_sr,
                    },
                );
                for t in 0..types {
                    let wa = a.weight_slice(t);
                    let wb = b.weight_slice(t);
                    let dst =
                        &mut out.data_mut()[t * out_sr * out_cols..(t + 1) * out_sr * out_cols];
                    match kind {
                        WwKind::MatVec => {
                            // (sa x c) * (c) -> (sa)
                            for i in 0..sa {
                                dst[i] = crate::tensor::dot(
                                    &wa[i * a.cols()..(i + 1) * a.cols()],
                                    wb,
                                );
                            }
                        }
                        WwKind::VecMat => {
                            // (sa) dot columns of (sa x c) -> (c)
                            for j in 0..a.cols() {
                                let mut acc = 0.0;
                                for (i, &bv) in wb.iter().enumerate() {
                                    acc += bv * wa[i * a.cols() + j];
                                }
                                dst[j] = acc;
                            }
                        }
                        WwKind::VecOuter => {
                            for (i, &av) in wa.iter().enumerate() {
                                for (j, &bv) in wb.iter().enumerate() {
                                    dst[i * b.cols() + j] = av * bv;
                                }
                            }
                        }
                    }
                }
                out
            }
            OpKind::Reshape { slice_rows, cols } => {
                let a = self.env.get(&op.args[0].name)?.clone();
                let ValueRole::Weight { types, .. } = a.role() else {
                    return Err(ExecError::Invalid("reshape wants a weight tensor".into()));
                };
                TensorValue::from_flat(
                    types * slice_rows,
                    *cols,
                    a.data().to_vec(),
                    ValueRole::Weight {
                        types,
                        slice_rows: *slice_rows,
                    },
                )
            }
            OpKind::Unary(k) => {
                let a = self.env.get(&op.args[0].name)?.clone();
                let mut data = vec![0.0; a.data().len()];
                apply_unary(*k, a.data(), &mut data);
                TensorValue::from_flat(a.rows(), a.cols(), data, a.role())
            }
            OpKind::Binary(k) => {
                let a = self.env.get(&op.args[0].name)?.clone();
                let b = self.env.get(&op.args[1].name)?.clone();
                if a.rows() != b.rows() || a.cols() != b.cols() {
                    return Err(ExecError::Shape {
                        name: op.result.name.clone(),
                        expected: format!("{}x{}", a.rows(), a.cols()),
                        got: format!("{}x{}", b.rows(), b.cols()),
                    });
                }
                let mut data = vec![0.0; a.data().len()];
                apply_binary(*k, a.data(), b.data(), &mut data);
                TensorValue::from_flat(a.rows(), a.cols(), data, a.role())
            }
            other => {
                return Err(ExecError::Invalid(format!(
                    "{} cannot run at top level",
                    other.label()
                )))
            }
        };
        self.env.bindings.insert(op.result.name.clone(), result);
        Ok(())
    }

    // ── GEMM instance execution ────────────────────────────────────────

    fn run_gemm(&mut self, inst: &crate::kernel::GemmInstance) -> Result<(), ExecError> {
        let g = self.graph();
        let rows = match inst.domain {
            RowDomain::Edges => g.num_edges(),
            RowDomain::Nodes => g.num_nodes(),
            RowDomain::CompactPairs => {
                self.env
                    .compact
                    .as_ref()
                    .ok_or(ExecError::MissingPreprocessing("build_compact_index"))?
                    .unique_count
            }
        };
        let base_cols = self.result_cols(&inst.op)?;
        // Iteration identities per row of the domain.
        let ids_of = |r: usize| -> RowIds {
            match inst.domain {
                RowDomain::Edges => {
                    let e = match (self.adjacency, &self.env.csr) {
                        (Adjacency::Csr, Some(csr)) => csr.edge_id[r],
                        _ => r,
                    };
                    self.row_ids_edge(e)
                }
                RowDomain::Nodes => RowIds {
                    node: Some(r),
                    ..RowIds::default()
                },
                RowDomain::CompactPairs => {
                    let ci = self.env.compact.as_ref().unwrap();
                    let src = ci.unique_row_idx[r];
                    RowIds {
                        pair: Some(r),
                        src: Some(src),
                        etype: Some(ci.etype_of_pair(r)),
                        ..RowIds::default()
                    }
                }
            }
        };

        let mut buf = vec![0.0; rows * base_cols];
        let this = &*self;
        let err = std::sync::Mutex::new(None::<ExecError>);
        fill_rows(self.env.mode, &mut buf, base_cols, |r, out| {
            let ids = ids_of(r);
            if let Err(x) = this.eval_row(&inst.op, &ids, out) {
                *err.lock().unwrap() = Some(x);
                return;
            }
            if let Some(scalar) = &inst.per_row_scalar {
                match this.arg_view(&VarRef::new(scalar.clone(), Access::Edge), &ids) {
                    Ok(s) => {
                        let sv = s.data[0];
                        for v in out.iter_mut() {
                            *v *= sv;
                        }
                    }
                    Err(x) => *err.lock().unwrap() = Some(x),
                }
            }
        });
        if let Some(x) = err.into_inner().unwrap() {
            return Err(x);
        }

        match inst.scatter {
            ScatterKind::Identity => {
                let role = match inst.out_mat {
                    Materialization::Node => ValueRole::Node,
                    Materialization::CompactPair => ValueRole::Compact,
                    _ => ValueRole::Edge,
                };
                // CSR iteration visits edges in entry order; rows store
                // back to their logical edge position.
                let tensor = if inst.domain == RowDomain::Edges
                    && self.adjacency == Adjacency::Csr
                {
                    let csr = self.env.csr.as_ref().unwrap();
                    let mut data = vec![0.0; rows * base_cols];
                    for r in 0..rows {
                        let e = csr.edge_id[r];
                        data[e * base_cols..(e + 1) * base_cols]
                            .copy_from_slice(&buf[r * base_cols..(r + 1) * base_cols]);
                    }
                    TensorValue::from_flat(rows, base_cols, data, role)
                } else {
                    TensorValue::from_flat(rows, base_cols, buf, role)
                };
                self.env.bindings.insert(inst.out_var.clone(), tensor);
            }
            scatter => {
                // Atomic accumulation, deterministically ordered by the
                // iteration position of each row.
                let targets: Vec<usize> = {
                    let g = self.graph();
                    (0..rows)
                        .map(|r| {
                            let ids = ids_of(r);
                            match scatter {
                                ScatterKind::NodeBySrc => ids.src.unwrap(),
                                ScatterKind::NodeByDst => ids.dst.unwrap(),
                                ScatterKind::WeightByEType => ids.etype.unwrap(),
                                ScatterKind::WeightByNType => g.node_type_of(
                                    ids.node.expect("ntype scatter in node domain"),
                                ),
                                ScatterKind::WeightSingle => 0,
                                ScatterKind::Identity => unreachable!(),
                            }
                        })
                        .collect()
                };
                let mut tensor = self
                    .env
                    .bindings
                    .remove(&inst.out_var)
                    .ok_or_else(|| ExecError::MissingBinding(inst.out_var.clone()))?;
                let slice_rows = match tensor.role() {
                    ValueRole::Weight { slice_rows, .. } => slice_rows,
                    _ => 1,
                };
                let t_cols = tensor.cols();
                for (r, &target) in targets.iter().enumerate() {
                    let base = target * slice_rows * t_cols;
                    for k in 0..base_cols {
                        tensor.data_mut()[base + k] += buf[r * base_cols + k];
                    }
                }
                self.env.bindings.insert(inst.out_var.clone(), tensor);
            }
        }
        Ok(())
    }

    fn expand_compact(&self, name: &str) -> Result<TensorValue, ExecError> {
        let t = self.env.get(name)?;
        let ci = self
            .env
            .compact
            .as_ref()
            .ok_or(ExecError::MissingPreprocessing("build_compact_index"))?;
        let e_count = self.graph().num_edges();
        let mut out = TensorValue::zeros(e_count, t.cols(), ValueRole::Edge);
        for e in 0..e_count {
            let p = ci.pair_of_edge[e];
            let src = t.row(p).to_vec();
            out.row_mut(e).copy_from_slice(&src);
        }
        Ok(out)
    }
}

#[derive(Default, Clone, Copy)]
struct RowIds {
    edge: Option<usize>,
    src: Option<usize>,
    dst: Option<usize>,
    etype: Option<usize>,
    pair: Option<usize>,
    node: Option<usize>,
}

fn rebind(op: &OpCall, endpoint: Access) -> OpCall {
    let swap = |r: &VarRef| -> VarRef {
        match r.access {
            Access::Node => VarRef::new(r.name.clone(), endpoint),
            Access::NType => VarRef::new(
                r.name.clone(),
                if endpoint == Access::Dst {
                    Access::DstNType
                } else {
                    Access::SrcNType
                },
            ),
            _ => r.clone(),
        }
    };
    let mut new = op.clone();
    new.result = swap(&op.result);
    new.args = op.args.iter().map(swap).collect();
    new
}

fn apply_unary(k: UnaryKind, x: &[f64], out: &mut [f64]) {
    match k {
        UnaryKind::Identity => out.copy_from_slice(x),
        UnaryKind::Exp => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = v.exp();
            }
        }
        UnaryKind::LeakyRelu { slope } => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = if v > 0.0 { v } else { slope * v };
            }
        }
        UnaryKind::Scale(c) => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = c * v;
            }
        }
        UnaryKind::LeakyReluGrad { slope } => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = if v > 0.0 { 1.0 } else { slope };
            }
        }
    }
}

fn apply_binary(k: BinaryKind, a: &[f64], b: &[f64], out: &mut [f64]) {
    let f = |x: f64, y: f64| -> f64 {
        match k {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => {
                debug_assert!(y != 0.0, "division by zero");
                x / y
            }
        }
    };
    if a.len() == b.len() {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
    } else if b.len() == 1 {
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x, b[0]);
        }
    } else {
        panic!("unsupported broadcast {} vs {}", a.len(), b.len());
    }
}
