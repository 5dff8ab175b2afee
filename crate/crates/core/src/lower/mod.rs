//! Greedy three-pass lowering of layer programs onto kernel instances.
//!
//! The first pass lowers every eligible operation to a GEMM-template
//! instance, folding in consumers the template can absorb: a per-row
//! scalar multiply at store time, and a following scatter-accumulation
//! (the store becomes atomic). The second pass, after loop
//! canonicalization and fusion, packs the remaining same-loop operations
//! into as few traversal instances as possible, splitting at
//! accumulation barriers. Whatever is left falls back to plain
//! interpreter execution with the lowest preference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::ir::passes::{canonicalize_loops, compact_applicable, fuse_loops};
use crate::ir::{
    Access, BinaryKind, OpCall, OpKind, Program, Role, ScopeKind, Stmt, TensorDecl,
};
use crate::kernel::{
    specialize_gemm, specialize_traversal, Adjacency, GemmInstance, GemmSchedule, Layout,
    Materialization, ScatterKind, TraversalInstance,
};

/// Instance selection order: GEMM template first, traversal template
/// next, plain fallback last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preference {
    Fallback = 0,
    Traversal = 1,
    Gemm = 2,
}

/// Preference level of an operation's best instance.
pub fn preference_of(op: &OpCall) -> Preference {
    match &op.op {
        OpKind::TypedLinear { .. } | OpKind::OuterProd => Preference::Gemm,
        OpKind::DotProd
        | OpKind::Unary(_)
        | OpKind::Binary(_)
        | OpKind::AccumulateSum
        | OpKind::RowwiseMatVec { .. } => Preference::Traversal,
        // Data manipulation and per-type weight products run on the host
        // runtime; they have no kernel template.
        OpKind::Reshape { .. }
        | OpKind::Concat
        | OpKind::SliceCols { .. }
        | OpKind::WeightWeightProduct(_) => Preference::Fallback,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackOp {
    pub op_id: usize,
    pub op: OpCall,
    pub scope: Option<ScopeKind>,
    pub reason: String,
}

/// Execution order entry referencing an instance or fallback op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecUnit {
    Gemm(usize),
    Traversal(usize),
    Fallback(usize),
}

/// A lowered program: kernel instances plus fallback list, covering every
/// operation of the (canonicalized, fused) source program exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPlan {
    pub program: Program,
    pub layout: Layout,
    pub adjacency: Adjacency,
    pub gemms: Vec<GemmInstance>,
    pub traversals: Vec<TraversalInstance>,
    pub fallback: Vec<FallbackOp>,
    /// Units in dependency-safe execution order.
    pub order: Vec<ExecUnit>,
    /// How each variable is materialized under this plan.
    pub materialization: BTreeMap<String, Materialization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowerOptions {
    pub layout: Layout,
    pub adjacency: Adjacency,
    pub schedule: GemmSchedule,
}

impl Default for LowerOptions {
    fn default() -> Self {
        Self {
            layout: Layout::Vanilla,
            adjacency: Adjacency::Coo,
            schedule: GemmSchedule::default(),
        }
    }
}

/// True when `consumer` can fold into the GEMM's store stage: it must
/// multiply the GEMM's output rows by a per-row scalar and sit in the
/// same loop.
pub fn can_fuse_gemm(
    g: &GemmInstance,
    consumer: &OpCall,
    same_scope: bool,
    decls: &BTreeMap<String, TensorDecl>,
) -> bool {
    if !same_scope {
        return false;
    }
    let OpKind::Binary(BinaryKind::Mul) = consumer.op else {
        return false;
    };
    let [a, s] = &consumer.args[..] else {
        return false;
    };
    a.name == g.out_var
        && a.access == Access::Edge
        && s.access == Access::Edge
        && decls.get(&s.name).map_or(false, |d| d.cols == 1)
        && decls.get(&a.name).map_or(false, |d| d.cols > 1)
}

/// True when `b` can join traversal instance `a`: same loop nest and no
/// read of a value some statement already in `a` aggregates (the
/// aggregation is complete only after the loop ends).
pub fn can_fuse_traversal(a: &TraversalInstance, b: &OpCall, same_scope: bool) -> bool {
    if !same_scope {
        return false;
    }
    let barriers: BTreeSet<&str> = a
        .stmts
        .iter()
        .filter(|s| s.op.op == OpKind::AccumulateSum)
        .map(|s| s.op.result.name.as_str())
        .collect();
    b.args.iter().all(|arg| !barriers.contains(arg.name.as_str()))
}

/// Lower a canonicalized program. Canonicalization and fusion are
/// idempotent and re-run here, so callers may pass any valid program.
pub fn lower(p: &Program, opts: LowerOptions) -> KernelPlan {
    let canonical = canonicalize_loops(p);
    let fused = fuse_loops(&canonical);
    let decls = fused.infer_decls().expect("program must validate");

    // Flatten ops with stable ids; ids are identical between `canonical`
    // and `fused` because fusion preserves statement order. Each op also
    // carries the identity of its enclosing lexical loop so "same loop
    // nest" means the same loop, not merely the same loop kind.
    let mut flat: Vec<(usize, Option<ScopeKind>, OpCall)> = Vec::new();
    let mut scope_tag: Vec<Option<usize>> = Vec::new();
    for (si, s) in fused.stmts.iter().enumerate() {
        match s {
            Stmt::Op(op) => {
                flat.push((flat.len(), None, op.clone()));
                scope_tag.push(None);
            }
            Stmt::Scope(sc) => {
                fn walk(
                    sc: &crate::ir::Scope,
                    kind: ScopeKind,
                    si: usize,
                    flat: &mut Vec<(usize, Option<ScopeKind>, OpCall)>,
                    scope_tag: &mut Vec<Option<usize>>,
                ) {
                    for st in &sc.body {
                        match st {
                            Stmt::Op(op) => {
                                flat.push((flat.len(), Some(kind), op.clone()));
                                scope_tag.push(Some(si));
                            }
                            Stmt::Scope(inner) => {
                                walk(inner, inner.kind, si, flat, scope_tag)
                            }
                        }
                    }
                }
                walk(sc, sc.kind, si, &mut flat, &mut scope_tag);
            }
        }
    }
    let n_ops = flat.len();

    let mut covered: Vec<bool> = vec![false; n_ops];
    let mut gemms: Vec<GemmInstance> = Vec::new();
    let mut traversals: Vec<TraversalInstance> = Vec::new();
    let mut fallback: Vec<FallbackOp> = Vec::new();
    // Scheduling position of each unit (last covered op id).
    let mut positions: Vec<(usize, ExecUnit)> = Vec::new();
    let mut next_kid = 0usize;

    let outputs: BTreeSet<&str> = fused.outputs.iter().map(String::as_str).collect();
    let consumers_of = |name: &str| -> Vec<usize> {
        flat.iter()
            .filter(|(_, _, o)| o.args.iter().any(|a| a.name == name))
            .map(|(id, _, _)| *id)
            .collect()
    };
    // Transitive dependence test: does `name`'s definition depend on `on`?
    let depends_on = |name: &str, on: &str| -> bool {
        let mut stack = vec![name.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(cur) = stack.pop() {
            if cur == on {
                return true;
            }
            if !seen.insert(cur.clone()) {
                continue;
            }
            for (_, _, o) in &flat {
                if o.result.name == cur {
                    stack.extend(o.args.iter().map(|a| a.name.clone()));
                }
            }
        }
        false
    };

    // ── Pass 1: GEMM-template instances ────────────────────────────────
    for i in 0..n_ops {
        let (op_id, ctx, op) = (&flat[i].0, flat[i].1, flat[i].2.clone());
        if covered[i] || preference_of(&op) != Preference::Gemm {
            continue;
        }
        match ctx {
            Some(ScopeKind::Edges) | Some(ScopeKind::DstNodes) | Some(ScopeKind::SrcNodes) => {}
            _ => continue, // non-canonical scopes fall through to pass 3
        }
        let res_cols = decls.get(&op.result.name).map_or(0, |d| d.cols);
        let inst_layout = if opts.layout == Layout::Compact
            && compact_applicable(&op, ctx, res_cols)
        {
            Layout::Compact
        } else {
            Layout::Vanilla
        };
        let mut inst = specialize_gemm(
            &op,
            *op_id,
            ctx,
            &decls,
            inst_layout,
            opts.adjacency,
            opts.schedule,
            next_kid,
        )
        .expect("layout applicability already checked");

        // Absorb a per-row scalar consumer into the store stage. Sound
        // only if the scalar multiply is the sole reader of the GEMM
        // output and the scalar itself does not depend on it, and only
        // in the per-edge domain (a compact instance has fewer rows than
        // the per-edge scalar).
        let mut last_pos = i;
        if inst.layout == Layout::Vanilla {
            let cons = consumers_of(&op.result.name);
            if cons.len() == 1 && !outputs.contains(op.result.name.as_str()) {
                let cid = cons[0];
                let (_, c_ctx, c_op) = &flat[cid];
                let same_scope = *c_ctx == ctx && scope_tag[cid] == scope_tag[i];
                if !covered[cid]
                    && can_fuse_gemm(&inst, c_op, same_scope, &decls)
                    && !depends_on(&c_op.args[1].name, &op.result.name)
                {
                    inst.per_row_scalar = Some(c_op.args[1].name.clone());
                    inst.internal.push(op.result.name.clone());
                    inst.out_var = c_op.result.name.clone();
                    inst.fused_ops.push(cid);
                    covered[cid] = true;
                    last_pos = cid;
                }
            }
        }
        // Absorb a following scatter-accumulation: the store becomes an
        // atomic add onto the aggregation target.
        if inst.layout == Layout::Vanilla {
            let cons = consumers_of(&inst.out_var);
            if cons.len() == 1 && !outputs.contains(inst.out_var.as_str()) {
                let cid = cons[0];
                let (_, c_ctx, c_op) = &flat[cid];
                if !covered[cid]
                    && *c_ctx == ctx
                    && scope_tag[cid] == scope_tag[i]
                    && c_op.op == OpKind::AccumulateSum
                    && c_op.args[0].name == inst.out_var
                {
                    let scatter = match c_op.result.access {
                        Access::Src => Some(ScatterKind::NodeBySrc),
                        Access::Dst => Some(ScatterKind::NodeByDst),
                        Access::EType => Some(ScatterKind::WeightByEType),
                        Access::NType => Some(ScatterKind::WeightByNType),
                        Access::SingleType => Some(ScatterKind::WeightSingle),
                        _ => None,
                    };
                    if let Some(scatter) = scatter {
                        inst.internal.push(inst.out_var.clone());
                        inst.out_var = c_op.result.name.clone();
                        inst.out_mat = match scatter {
                            ScatterKind::NodeBySrc | ScatterKind::NodeByDst => {
                                Materialization::Node
                            }
                            _ => Materialization::Weight,
                        };
                        inst.scatter = scatter;
                        inst.atomic_output = scatter.needs_atomics();
                        inst.fused_ops.push(cid);
                        covered[cid] = true;
                        last_pos = last_pos.max(cid);
                    }
                }
            }
        }
        covered[i] = true;
        positions.push((last_pos, ExecUnit::Gemm(gemms.len())));
        gemms.push(inst);
        next_kid += 1;
    }

    // ── Pass 2: traversal-template instances over the residue ──────────
    // Group scope-by-scope so "same loop nest" is meaningful.
    let mut scope_runs: Vec<(Option<ScopeKind>, Vec<usize>)> = Vec::new();
    {
        let mut idx = 0usize;
        for s in &fused.stmts {
            match s {
                Stmt::Op(_) => {
                    scope_runs.push((None, vec![idx]));
                    idx += 1;
                }
                Stmt::Scope(sc) => {
                    let mut ids = Vec::new();
                    collect_scope_ops(sc, &mut idx, &mut ids);
                    scope_runs.push((Some(sc.kind), ids));
                }
            }
        }
    }

    for (scope, ids) in &scope_runs {
        let Some(kind) = scope else { continue };
        if !matches!(
            kind,
            ScopeKind::Edges | ScopeKind::DstNodes | ScopeKind::SrcNodes
        ) {
            continue;
        }
        let mut current: Vec<(usize, OpCall)> = Vec::new();
        let flush =
            |current: &mut Vec<(usize, OpCall)>,
             traversals: &mut Vec<TraversalInstance>,
             positions: &mut Vec<(usize, ExecUnit)>,
             next_kid: &mut usize| {
                if current.is_empty() {
                    return;
                }
                let internal = internal_temporaries(current, &flat, &outputs);
                let inst = specialize_traversal(
                    current,
                    *kind,
                    &decls,
                    opts.layout,
                    opts.adjacency,
                    *next_kid,
                    internal,
                );
                let last = current.iter().map(|(id, _)| *id).max().unwrap();
                positions.push((last, ExecUnit::Traversal(traversals.len())));
                traversals.push(inst);
                *next_kid += 1;
                current.clear();
            };
        for &id in ids {
            if covered[id] {
                // An op already lowered in pass 1 splits the run only if
                // it consumes a value the run produces; otherwise its
                // instance is scheduled earlier and the run stays whole.
                let reads_group = flat[id]
                    .2
                    .args
                    .iter()
                    .any(|a| current.iter().any(|(_, o)| o.result.name == a.name));
                if reads_group {
                    flush(&mut current, &mut traversals, &mut positions, &mut next_kid);
                }
                continue;
            }
            let op = &flat[id].2;
            if preference_of(op) != Preference::Traversal {
                flush(&mut current, &mut traversals, &mut positions, &mut next_kid);
                continue;
            }
            if !current.is_empty() {
                let probe = specialize_traversal(
                    &current,
                    *kind,
                    &decls,
                    opts.layout,
                    opts.adjacency,
                    usize::MAX,
                    Vec::new(),
                );
                if !can_fuse_traversal(&probe, op, true) {
                    flush(&mut current, &mut traversals, &mut positions, &mut next_kid);
                }
            }
            current.push((id, op.clone()));
            covered[id] = true;
        }
        flush(&mut current, &mut traversals, &mut positions, &mut next_kid);
    }

    // ── Pass 3: the rest falls back to the host runtime ────────────────
    for (i, (op_id, ctx, op)) in flat.iter().enumerate() {
        if covered[i] {
            continue;
        }
        let reason = match ctx {
            Some(ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges) => {
                "non-canonical scope".to_string()
            }
            _ => "preference".to_string(),
        };
        covered[i] = true;
        positions.push((*op_id, ExecUnit::Fallback(fallback.len())));
        fallback.push(FallbackOp {
            op_id: *op_id,
            op: op.clone(),
            scope: *ctx,
            reason,
        });
    }

    positions.sort_by_key(|(pos, _)| *pos);
    let order: Vec<ExecUnit> = positions.into_iter().map(|(_, u)| u).collect();

    let materialization = materialization_map(&decls, &gemms);

    KernelPlan {
        program: fused,
        layout: opts.layout,
        adjacency: opts.adjacency,
        gemms,
        traversals,
        fallback,
        order,
        materialization,
    }
}

fn collect_scope_ops(sc: &crate::ir::Scope, idx: &mut usize, ids: &mut Vec<usize>) {
    for s in &sc.body {
        match s {
            Stmt::Op(_) => {
                ids.push(*idx);
                *idx += 1;
            }
            Stmt::Scope(inner) => {
                // nested neighbor scopes keep their ops out of this run
                let mut nested = Vec::new();
                collect_scope_ops(inner, idx, &mut nested);
            }
        }
    }
}

fn internal_temporaries(
    group: &[(usize, OpCall)],
    flat: &[(usize, Option<ScopeKind>, OpCall)],
    outputs: &BTreeSet<&str>,
) -> Vec<String> {
    let in_group: BTreeSet<usize> = group.iter().map(|(id, _)| *id).collect();
    let mut internal = Vec::new();
    for (_, op) in group {
        if op.op == OpKind::AccumulateSum {
            continue;
        }
        let name = &op.result.name;
        if outputs.contains(name.as_str()) {
            continue;
        }
        let escapes = flat.iter().any(|(id, _, o)| {
            !in_group.contains(id) && o.args.iter().any(|a| &a.name == name)
        });
        if !escapes {
            internal.push(name.clone());
        }
    }
    internal
}

fn materialization_map(
    decls: &BTreeMap<String, TensorDecl>,
    gemms: &[GemmInstance],
) -> BTreeMap<String, Materialization> {
    let mut map = BTreeMap::new();
    for (name, d) in decls {
        let m = match d.role {
            Role::Node { .. } => Materialization::Node,
            Role::Edge => Materialization::Edge,
            _ => Materialization::Weight,
        };
        map.insert(name.clone(), m);
    }
    for g in gemms {
        if g.out_mat == Materialization::CompactPair {
            map.insert(g.out_var.clone(), Materialization::CompactPair);
        }
    }
    map
}

impl KernelPlan {
    /// Exact-partition check: every operation is covered exactly once.
    pub fn coverage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.program.num_ops()];
        for g in &self.gemms {
            for id in &g.fused_ops {
                counts[*id] += 1;
            }
        }
        for t in &self.traversals {
            for id in t.fused_ops() {
                counts[id] += 1;
            }
        }
        for f in &self.fallback {
            counts[f.op_id] += 1;
        }
        counts
    }

    /// Deterministic text form consumed by golden tests and the CLI.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "plan {} layout={} adjacency={}",
            self.program.name,
            self.layout.label(),
            self.adjacency.label()
        );
        let mut lines: Vec<(usize, String)> = Vec::new();
        for g in &self.gemms {
            let scalar = g.per_row_scalar.as_deref().unwrap_or("none");
            let line = format!(
                "gemm_{} op={} result={} domain={} out={} scatter={} atomic={} scalar={} \
                 transpose_w={} tile={} coarsen={} layout={} ops={:?} internal={:?}",
                g.kid,
                g.op.op.label(),
                g.out_var,
                g.domain.label(),
                g.out_mat.label(),
                g.scatter.label(),
                g.atomic_output,
                scalar,
                g.transpose_weight,
                g.schedule.tile_width,
                g.schedule.coarsening_factor,
                g.layout.label(),
                g.fused_ops,
                g.internal,
            );
            lines.push((g.kid, line));
        }
        for t in &self.traversals {
            let stmts = t
                .stmts
                .iter()
                .map(|s| format!("{}:{}", s.op.result.name, s.hoist.label()))
                .collect::<Vec<_>>()
                .join(",");
            let line = format!(
                "traversal_{} scope={} stmts=[{}] partial_agg={} ops={:?} internal={:?}",
                t.kid,
                t.scope.label(),
                stmts,
                t.partial_aggregation,
                t.fused_ops(),
                t.internal,
            );
            lines.push((t.kid, line));
        }
        lines.sort_by_key(|(kid, _)| *kid);
        for (_, l) in lines {
            let _ = writeln!(out, "{l}");
        }
        for f in &self.fallback {
            let _ = writeln!(
                out,
                "fallback op={} result={} reason={}",
                f.op.op.label(),
                f.op.result.name,
                f.reason
            );
        }
        let order = self
            .order
            .iter()
            .map(|u| match u {
                ExecUnit::Gemm(i) => format!("gemm_{}", self.gemms[*i].kid),
                ExecUnit::Traversal(i) => format!("traversal_{}", self.traversals[*i].kid),
                ExecUnit::Fallback(i) => format!("fallback:{}", self.fallback[*i].op.result.name),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(out, "order: {order}");
        out
    }
}
