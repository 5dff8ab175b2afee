//! Program transformations: graph-semantic loop canonicalization, loop
//! fusion, linear-operator reordering, and gradient pruning.

use std::collections::BTreeSet;

use super::{
    call, vr, Access, OpCall, OpKind, Program, Scope, ScopeKind, Stmt, VarRef, WwKind,
};
use crate::graph::GraphStats;

/// Rewrite node-plus-neighbor loop nests into flat edge loops.
///
/// A for-each over the edges is equivalent to a for-each loop nest over
/// the incoming (or outgoing) edges of every destination (or source)
/// node, so a node scope whose body consists solely of neighbor scopes
/// collapses into flat edge loops, with the node accessor rebound to the
/// matching edge endpoint. Scopes that mix nodewise statements with
/// neighbor scopes are left intact.
pub fn canonicalize_loops(p: &Program) -> Program {
    let mut out = p.clone();
    let mut stmts = Vec::with_capacity(p.stmts.len());
    for s in &p.stmts {
        match s {
            Stmt::Scope(sc) if sc.kind.is_node_scope() && all_neighbor_scopes(&sc.body) => {
                for inner in &sc.body {
                    let Stmt::Scope(nb) = inner else { unreachable!() };
                    let endpoint = match nb.kind {
                        ScopeKind::IncomingEdges => Access::Dst,
                        ScopeKind::OutgoingEdges => Access::Src,
                        _ => unreachable!(),
                    };
                    let body = nb
                        .body
                        .iter()
                        .map(|st| rebind_node_access(st, endpoint))
                        .collect();
                    stmts.push(Stmt::Scope(Scope {
                        kind: ScopeKind::Edges,
                        body,
                    }));
                }
            }
            other => stmts.push(other.clone()),
        }
    }
    out.stmts = stmts;
    out
}

fn all_neighbor_scopes(body: &[Stmt]) -> bool {
    !body.is_empty()
        && body.iter().all(|s| {
            matches!(
                s,
                Stmt::Scope(Scope {
                    kind: ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges,
                    ..
                })
            )
        })
}

fn rebind_node_access(s: &Stmt, endpoint: Access) -> Stmt {
    match s {
        Stmt::Scope(_) => s.clone(), // neighbor scopes cannot nest further
        Stmt::Op(op) => {
            let swap = |r: &VarRef| -> VarRef {
                if r.access == Access::Node {
                    VarRef::new(r.name.clone(), endpoint)
                } else if r.access == Access::NType {
                    let a = if endpoint == Access::Dst {
                        Access::DstNType
                    } else {
                        Access::SrcNType
                    };
                    VarRef::new(r.name.clone(), a)
                } else {
                    r.clone()
                }
            };
            let mut new = op.clone();
            new.result = swap(&op.result);
            new.args = op.args.iter().map(swap).collect();
            Stmt::Op(new)
        }
    }
}

/// Merge adjacent same-kind top-level loops when no dependence hazard
/// blocks it. A hazard exists when one loop reads a value that the other
/// accumulates: the aggregation is only complete once its whole loop has
/// run, so the accumulation acts as a fusion barrier.
pub fn fuse_loops(p: &Program) -> Program {
    let mut out = p.clone();
    let mut stmts: Vec<Stmt> = Vec::with_capacity(p.stmts.len());
    for s in &p.stmts {
        let Stmt::Scope(sc) = s else {
            stmts.push(s.clone());
            continue;
        };
        if let Some(Stmt::Scope(prev)) = stmts.last_mut() {
            if prev.kind == sc.kind && !fusion_hazard(&prev.body, &sc.body) {
                prev.body.extend(sc.body.iter().cloned());
                continue;
            }
        }
        stmts.push(s.clone());
    }
    out.stmts = stmts;
    out
}

fn reads_of(body: &[Stmt]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for s in body {
        match s {
            Stmt::Op(op) => set.extend(op.args.iter().map(|a| a.name.clone())),
            Stmt::Scope(sc) => set.extend(reads_of(&sc.body)),
        }
    }
    set
}

fn accum_targets_of(body: &[Stmt]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for s in body {
        match s {
            Stmt::Op(op) if op.op == OpKind::AccumulateSum => {
                set.insert(op.result.name.clone());
            }
            Stmt::Scope(sc) => set.extend(accum_targets_of(&sc.body)),
            _ => {}
        }
    }
    set
}

pub(crate) fn fusion_hazard(a: &[Stmt], b: &[Stmt]) -> bool {
    let acc_a = accum_targets_of(a);
    let acc_b = accum_targets_of(b);
    !reads_of(b).is_disjoint(&acc_a) || !reads_of(a).is_disjoint(&acc_b)
}

/// One rewritten linear-operator chain, with the multiply counts of the
/// two forms so profitability can be inspected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReorderRecord {
    /// Result variable of the rewritten dot product.
    pub dot_result: String,
    /// Name given to the hoisted weight-weight product.
    pub ww_name: String,
    /// Multiplies of (typed linear + dot) per the vanilla edge count.
    pub before_multiplies: u64,
    /// Multiplies of (weight-weight product + dot on the raw feature).
    pub after_multiplies: u64,
}

/// Switch the order of a typed linear followed by a per-type dot product
/// whenever this produces an operator between weights: the weight-weight
/// product is computed once per type and the per-edge work shrinks from a
/// matrix to a vector product. Applied unconditionally on pattern match;
/// the returned records carry the multiply counts of both forms.
pub fn reorder_linear_ops(p: &Program, stats: &GraphStats) -> (Program, Vec<ReorderRecord>) {
    let decls = match p.infer_decls() {
        Ok(d) => d,
        Err(_) => return (p.clone(), Vec::new()),
    };
    let mut out = p.clone();
    let mut records = Vec::new();
    let mut new_ww: Vec<(String, OpCall)> = Vec::new();
    let mut removed_defs: BTreeSet<String> = BTreeSet::new();

    for stmt in &mut out.stmts {
        let Stmt::Scope(sc) = stmt else { continue };
        if sc.kind != ScopeKind::Edges {
            continue;
        }
        // Defining op of every edge-local variable in this scope.
        let defs: Vec<(String, OpCall)> = sc
            .body
            .iter()
            .filter_map(|s| match s {
                Stmt::Op(op) if op.op != OpKind::AccumulateSum => {
                    Some((op.result.name.clone(), op.clone()))
                }
                _ => None,
            })
            .collect();
        let find_def = |n: &str| defs.iter().find(|(d, _)| d == n).map(|(_, o)| o.clone());

        for s in &mut sc.body {
            let Stmt::Op(op) = s else { continue };
            if op.op != OpKind::DotProd {
                continue;
            }
            let [a, w] = &op.args[..] else { continue };
            if w.access != Access::EType || a.access != Access::Edge {
                continue;
            }
            let Some(wdecl) = decls.get(&w.name) else { continue };
            if wdecl.slice_rows != 1 {
                continue;
            }
            let Some(lin) = find_def(&a.name) else { continue };
            let OpKind::TypedLinear {
                transpose_weight: false,
            } = lin.op
            else {
                continue;
            };
            let lin_w = &lin.args[1];
            if lin_w.access != Access::EType {
                continue;
            }
            let Some(lwdecl) = decls.get(&lin_w.name) else { continue };
            let (d_in, d_out) = (lwdecl.slice_rows, lwdecl.cols);
            let types = lwdecl.role.weight_types() as u64;
            let ww_name = format!("ww_{}", w.name);
            if !new_ww.iter().any(|(n, _)| n == &ww_name) {
                new_ww.push((
                    ww_name.clone(),
                    call(
                        OpKind::WeightWeightProduct(WwKind::MatVec),
                        vr(&ww_name, Access::Plain),
                        vec![
                            vr(&lin_w.name, Access::Plain),
                            vr(&w.name, Access::Plain),
                        ],
                    ),
                ));
            }
            let e = stats.edge_count as u64;
            records.push(ReorderRecord {
                dot_result: op.result.name.clone(),
                ww_name: ww_name.clone(),
                before_multiplies: e * (d_in as u64 * d_out as u64 + d_out as u64),
                after_multiplies: types * d_in as u64 * d_out as u64 + e * d_in as u64,
            });
            removed_defs.insert(a.name.clone());
            op.args = vec![lin.args[0].clone(), vr(&ww_name, Access::EType)];
        }
    }

    if records.is_empty() {
        return (out, records);
    }

    // Hoist the weight-weight products ahead of the first loop.
    let insert_at = out
        .stmts
        .iter()
        .position(|s| matches!(s, Stmt::Scope(_)))
        .unwrap_or(0);
    for (i, (_, op)) in new_ww.into_iter().enumerate() {
        out.stmts.insert(insert_at + i, Stmt::Op(op));
    }

    // Drop rewritten typed linears that no longer have a reader.
    let still_used = |name: &str, prog: &Program| -> bool {
        let mut used = prog.outputs.iter().any(|o| o == name);
        prog.visit_ops(|_, _, op| {
            if op.args.iter().any(|a| a.name == name) {
                used = true;
            }
        });
        used
    };
    for name in removed_defs {
        if !still_used(&name, &out) {
            retain_ops(&mut out.stmts, &|op: &OpCall| op.result.name != name);
        }
    }
    (out, records)
}

fn retain_ops(stmts: &mut Vec<Stmt>, keep: &dyn Fn(&OpCall) -> bool) {
    stmts.retain_mut(|s| match s {
        Stmt::Op(op) => keep(op),
        Stmt::Scope(sc) => {
            retain_ops(&mut sc.body, keep);
            !sc.body.is_empty()
        }
    });
}

/// Drop every statement of a backward program that the wanted gradients
/// cannot reach. Remaining statements compute identical values.
pub fn prune_unused_gradients(p: &Program, wanted: &BTreeSet<String>) -> Program {
    let mut live: BTreeSet<String> = wanted.clone();
    // One reverse pass suffices: uses always follow definitions.
    let mut keep_flags: Vec<bool> = Vec::new();
    let mut flat: Vec<&OpCall> = Vec::new();
    p.visit_ops(|_, _, op| flat.push(op));
    keep_flags.resize(flat.len(), false);
    for (i, op) in flat.iter().enumerate().rev() {
        if live.contains(&op.result.name) {
            keep_flags[i] = true;
            live.extend(op.args.iter().map(|a| a.name.clone()));
        }
    }

    let mut idx = 0usize;
    let mut out = p.clone();
    fn filter(stmts: &[Stmt], keep: &[bool], idx: &mut usize) -> Vec<Stmt> {
        let mut result = Vec::new();
        for s in stmts {
            match s {
                Stmt::Op(op) => {
                    if keep[*idx] {
                        result.push(Stmt::Op(op.clone()));
                    }
                    *idx += 1;
                }
                Stmt::Scope(sc) => {
                    let body = filter(&sc.body, keep, idx);
                    if !body.is_empty() {
                        result.push(Stmt::Scope(Scope {
                            kind: sc.kind,
                            body,
                        }));
                    }
                }
            }
        }
        result
    }
    out.stmts = filter(&p.stmts, &keep_flags, &mut idx);

    // Trim declarations and outputs to what survived.
    let mut referenced: BTreeSet<String> = BTreeSet::new();
    out.visit_ops(|_, _, op| {
        referenced.insert(op.result.name.clone());
        referenced.extend(op.args.iter().map(|a| a.name.clone()));
    });
    out.inputs.retain(|d| referenced.contains(&d.name));
    out.locals.retain(|d| referenced.contains(&d.name));
    out.outputs.retain(|o| wanted.contains(o));
    out
}

/// True when the op only reads source-node data and edge-type-selected
/// weights and produces a per-edge vector: the condition under which a
/// row per unique `(edge type, source)` pair suffices.
pub fn compact_applicable(op: &OpCall, ctx: Option<ScopeKind>, decls_cols: usize) -> bool {
    if ctx != Some(ScopeKind::Edges) || op.result.access != Access::Edge {
        return false;
    }
    if op.op == OpKind::AccumulateSum || decls_cols <= 1 {
        return false;
    }
    op.args.iter().all(|a| match a.access {
        Access::Src => true,
        Access::EType => true,
        Access::SrcNType => true,
        _ => false,
    })
}

/// Validation guard used by passes that synthesize fresh names.
pub(crate) fn assert_no_reserved_names(p: &Program) -> Result<(), super::IrError> {
    let mut bad: Option<String> = None;
    for d in &p.inputs {
        if d.name.contains("__") {
            bad = Some(d.name.clone());
        }
    }
    p.visit_ops(|_, _, op| {
        if op.result.name.contains("__") {
            bad = Some(op.result.name.clone());
        }
    });
    match bad {
        Some(name) => Err(super::IrError::BadOp {
            op: "derive_backward".into(),
            msg: format!("forward names must not contain \"__\" (got {name})"),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{BinaryKind, ProgramBuilder, TensorDecl, UnaryKind};
    use super::*;

    fn softmax_like() -> Program {
        // for e: y = exp(x); for n { for e in incoming: s += y }; for e: z = y / s[dst]
        let mut b = ProgramBuilder::new("softmax_like");
        b.input(TensorDecl::edge("x", 1));
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::Unary(UnaryKind::Exp),
                vr("y", Access::Edge),
                vec![vr("x", Access::Edge)],
            ))],
        );
        b.scope(
            ScopeKind::DstNodes,
            vec![Stmt::Scope(Scope {
                kind: ScopeKind::IncomingEdges,
                body: vec![Stmt::Op(call(
                    OpKind::AccumulateSum,
                    vr("s", Access::Node),
                    vec![vr("y", Access::Edge)],
                ))],
            })],
        );
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::Binary(BinaryKind::Div),
                vr("z", Access::Edge),
                vec![vr("y", Access::Edge), vr("s", Access::Dst)],
            ))],
        );
        b.output("z");
        b.finish()
    }

    #[test]
    fn canonicalize_flattens_node_nest() {
        let p = softmax_like();
        let c = canonicalize_loops(&p);
        c.validate().unwrap();
        let kinds: Vec<_> = c
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Scope(sc) => sc.kind,
                _ => panic!("expected scopes"),
            })
            .collect();
        assert_eq!(
            kinds,
            vec![ScopeKind::Edges, ScopeKind::Edges, ScopeKind::Edges]
        );
        // the accumulate now scatters via @dst
        let Stmt::Scope(sc) = &c.stmts[1] else { panic!() };
        let Stmt::Op(op) = &sc.body[0] else { panic!() };
        assert_eq!(op.result.access, Access::Dst);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let p = softmax_like();
        let once = canonicalize_loops(&p);
        let twice = canonicalize_loops(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn fuse_respects_accumulation_barrier() {
        let c = canonicalize_loops(&softmax_like());
        let f = fuse_loops(&c);
        f.validate().unwrap();
        // exp + accumulate fuse; the divide reads the aggregated value and
        // must stay behind the barrier.
        assert_eq!(f.stmts.len(), 2);
        let Stmt::Scope(first) = &f.stmts[0] else { panic!() };
        assert_eq!(first.body.len(), 2);
    }

    #[test]
    fn fuse_merges_independent_edge_loops() {
        let mut b = ProgramBuilder::new("two_loops");
        b.input(TensorDecl::edge("x", 4));
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::Unary(UnaryKind::Exp),
                vr("a", Access::Edge),
                vec![vr("x", Access::Edge)],
            ))],
        );
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::Unary(UnaryKind::Scale(2.0)),
                vr("b", Access::Edge),
                vec![vr("x", Access::Edge)],
            ))],
        );
        b.output("a");
        b.output("b");
        let f = fuse_loops(&b.finish());
        assert_eq!(f.stmts.len(), 1);
    }

    #[test]
    fn canonicalize_handles_outgoing_nests() {
        // for n in src_nodes { for e in n.outgoing_edges() { ... } }
        let mut b = ProgramBuilder::new("outgoing");
        b.input(TensorDecl::node("x", 2));
        b.scope(
            ScopeKind::SrcNodes,
            vec![Stmt::Scope(Scope {
                kind: ScopeKind::OutgoingEdges,
                body: vec![Stmt::Op(call(
                    OpKind::AccumulateSum,
                    vr("deg", Access::Node),
                    vec![vr("x", Access::Node)],
                ))],
            })],
        );
        b.output("deg");
        let c = canonicalize_loops(&b.finish());
        c.validate().unwrap();
        let Stmt::Scope(sc) = &c.stmts[0] else { panic!() };
        assert_eq!(sc.kind, ScopeKind::Edges);
        let Stmt::Op(op) = &sc.body[0] else { panic!() };
        // the node is the edge's source in an outgoing nest
        assert_eq!(op.result.access, Access::Src);
        assert_eq!(op.args[0].access, Access::Src);
    }

    #[test]
    fn reorder_without_the_pattern_is_identity() {
        let p = softmax_like();
        let g = crate::graph::HeteroGraph::new(vec![2], 1, vec![(0, 1, 0)])
            .unwrap()
            .sort_edges_by_type();
        let ci = g.build_compact_index();
        let (out, records) = reorder_linear_ops(&p, &g.stats(&ci));
        assert!(records.is_empty());
        assert_eq!(out, p);
    }

    #[test]
    fn prune_keeps_wanted_values_only() {
        let p = softmax_like();
        let wanted: BTreeSet<String> = ["z".to_string()].into();
        let pruned = prune_unused_gradients(&p, &wanted);
        assert_eq!(pruned.outputs, vec!["z"]);
        assert_eq!(pruned.num_ops(), 3); // everything feeds z here

        let wanted_none: BTreeSet<String> = BTreeSet::new();
        let empty = prune_unused_gradients(&p, &wanted_none);
        assert_eq!(empty.num_ops(), 0);
        assert!(empty.stmts.is_empty());
    }
}
