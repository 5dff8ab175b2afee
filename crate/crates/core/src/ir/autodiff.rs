//! Reverse-mode differentiation emitted as a backward program in the
//! same IR.
//!
//! The backward program takes the forward inputs, the forward
//! intermediate values it needs, and one seed tensor per declared output
//! (`seed__<out>`, bound to ones for the sum-of-outputs loss), and
//! computes `g__<name>` for every declared forward input. Gradients that
//! scatter onto nodes or weights are emitted as `AccumulateSum`
//! statements; the adjoint of an `AccumulateSum` is a broadcast of the
//! target's gradient back onto the edges.

use std::collections::BTreeMap;

use super::passes::{assert_no_reserved_names, canonicalize_loops};
use super::{
    call, vr, Access, BinaryKind, DeclKind, IrError, OpCall, OpKind, Program, Role, Scope,
    ScopeKind, Stmt, TensorDecl, UnaryKind, VarRef, WwKind,
};

pub fn derive_backward(p: &Program) -> Result<Program, IrError> {
    assert_no_reserved_names(p)?;
    let fwd = canonicalize_loops(p);
    fwd.validate()?;
    check_differentiable(&fwd)?;
    let decls = fwd.infer_decls()?;

    let mut em = Emitter {
        decls,
        partials: BTreeMap::new(),
        fresh: 0,
        locals: Vec::new(),
        origin: None,
    };

    // Seed one gradient per declared output.
    let mut seed_inputs = Vec::new();
    for out in &fwd.outputs {
        let d = &em.decls[out];
        let seed = format!("seed__{out}");
        seed_inputs.push(TensorDecl {
            name: seed.clone(),
            role: d.role,
            slice_rows: d.slice_rows,
            cols: d.cols,
            kind: DeclKind::Input,
        });
        em.partials.entry(out.clone()).or_default().push(seed);
    }

    // Forward op index in pre-order, for provenance bookkeeping.
    fn count_ops(s: &Stmt) -> usize {
        match s {
            Stmt::Op(_) => 1,
            Stmt::Scope(sc) => sc.body.iter().map(count_ops).sum(),
        }
    }
    let fwd_op_counts: Vec<usize> = fwd.stmts.iter().map(count_ops).collect();
    let mut next_base = fwd_op_counts.iter().sum::<usize>();

    let mut out_stmts: Vec<Stmt> = Vec::new();
    for (si, s) in fwd.stmts.iter().enumerate().rev() {
        next_base -= fwd_op_counts[si];
        match s {
            Stmt::Op(op) => {
                em.origin = Some(next_base);
                let mut top = Vec::new();
                em.adjoint_top_level(op, &mut top)?;
                out_stmts.extend(top);
            }
            Stmt::Scope(sc) => {
                let mut pre: Vec<Stmt> = Vec::new();
                let mut body: Vec<OpCall> = Vec::new();
                for (oi, st) in sc.body.iter().enumerate().rev() {
                    let Stmt::Op(op) = st else {
                        return Err(IrError::BadOp {
                            op: "derive_backward".into(),
                            msg: "nested scopes must be canonicalized first".into(),
                        });
                    };
                    em.origin = Some(next_base + oi);
                    em.adjoint_in_scope(op, sc.kind, &mut pre, &mut body)?;
                }
                out_stmts.extend(pre);
                if !body.is_empty() {
                    out_stmts.push(Stmt::Scope(Scope {
                        kind: sc.kind,
                        body: body.into_iter().map(Stmt::Op).collect(),
                    }));
                }
            }
        }
    }
    em.origin = None;

    // Final gradients, one per declared forward input, in declaration order.
    let mut outputs = Vec::new();
    let mut final_stmts: Vec<Stmt> = Vec::new();
    for d in &fwd.inputs {
        let gname = format!("g__{}", d.name);
        let combined = em.combined_grad(&d.name, &mut final_stmts)?;
        let stmt = match combined {
            Some(src) => em.rename_stmt(d, &src, &gname),
            // Unused input: gradient is identically zero; scaling the
            // input itself by zero keeps the shape without new op kinds.
            None => em.scale_zero_stmt(d, &gname),
        };
        final_stmts.push(stmt);
        outputs.push(gname);
    }
    out_stmts.extend(final_stmts);

    // Inputs of the backward program: forward inputs, referenced forward
    // values, then seeds: in a deterministic order.
    let mut defined: BTreeMap<String, ()> = BTreeMap::new();
    for d in &em.locals {
        defined.insert(d.name.clone(), ());
    }
    let bwd_probe = Program {
        name: String::new(),
        inputs: Vec::new(),
        locals: Vec::new(),
        stmts: out_stmts.clone(),
        outputs: Vec::new(),
    };
    bwd_probe.visit_ops(|_, _, op| {
        if op.op != OpKind::AccumulateSum {
            defined.insert(op.result.name.clone(), ());
        }
    });
    let mut referenced: BTreeMap<String, ()> = BTreeMap::new();
    bwd_probe.visit_ops(|_, _, op| {
        for a in &op.args {
            referenced.insert(a.name.clone(), ());
        }
    });

    let mut inputs: Vec<TensorDecl> = Vec::new();
    for d in &fwd.inputs {
        if referenced.contains_key(&d.name) {
            inputs.push(d.clone());
        }
    }
    // Forward intermediates in first-definition order.
    let mut inter_order: Vec<String> = Vec::new();
    fwd.visit_ops(|_, _, op| {
        if !inter_order.contains(&op.result.name) {
            inter_order.push(op.result.name.clone());
        }
    });
    for name in inter_order {
        if referenced.contains_key(&name) && !defined.contains_key(&name) {
            let d = &em.decls[&name];
            inputs.push(TensorDecl {
                name: name.clone(),
                role: d.role,
                slice_rows: d.slice_rows,
                cols: d.cols,
                kind: DeclKind::Input,
            });
        }
    }
    for seed in seed_inputs {
        if referenced.contains_key(&seed.name) {
            inputs.push(seed);
        }
    }

    let bwd = Program {
        name: format!("{}__bwd", fwd.name),
        inputs,
        locals: em.locals,
        stmts: out_stmts,
        outputs,
    };
    bwd.validate()?;
    Ok(bwd)
}

fn check_differentiable(p: &Program) -> Result<(), IrError> {
    let mut bad: Option<String> = None;
    p.visit_ops(|_, _, op| {
        let ok = matches!(
            op.op,
            OpKind::TypedLinear { .. }
                | OpKind::DotProd
                | OpKind::OuterProd
                | OpKind::Unary(
                    UnaryKind::Identity
                        | UnaryKind::Exp
                        | UnaryKind::LeakyRelu { .. }
                        | UnaryKind::Scale(_)
                )
                | OpKind::Binary(_)
                | OpKind::AccumulateSum
                | OpKind::Reshape { .. }
                | OpKind::Concat
                | OpKind::SliceCols { .. }
                | OpKind::WeightWeightProduct(WwKind::MatVec)
        );
        if !ok && bad.is_none() {
            bad = Some(op.op.label());
        }
        // Forward accumulation into weights has no use in the zoo and no
        // second-order story; reject it.
        if op.op == OpKind::AccumulateSum && op.result.access.is_type_select() && bad.is_none() {
            bad = Some("accumulate_sum into weights".into());
        }
    });
    match bad {
        Some(op) => Err(IrError::NotDifferentiable(op)),
        None => Ok(()),
    }
}

struct Emitter {
    decls: BTreeMap<String, TensorDecl>,
    /// Forward var -> gradient partial tensors collected so far.
    partials: BTreeMap<String, Vec<String>>,
    fresh: usize,
    locals: Vec<TensorDecl>,
    origin: Option<usize>,
}

impl Emitter {
    fn fresh_name(&mut self, base: &str) -> String {
        let n = format!("g{}__{}", self.fresh, base);
        self.fresh += 1;
        n
    }

    fn mk(&self, op: OpKind, result: VarRef, args: Vec<VarRef>) -> OpCall {
        let mut c = call(op, result, args);
        c.origin = self.origin;
        c
    }

    /// Combine the collected partials of `var` into one tensor; `pre`
    /// receives any scope needed for the combination (node adds run in a
    /// node scope, weight adds at top level). Returns `None` for a zero
    /// gradient.
    fn combined_grad(&mut self, var: &str, pre: &mut Vec<Stmt>) -> Result<Option<String>, IrError> {
        let parts = self.partials.get(var).cloned().unwrap_or_default();
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0].clone())),
            _ => {
                let d = self.decls[var].clone();
                let mut acc = parts[0].clone();
                for nxt in &parts[1..] {
                    let sum = self.fresh_name(var);
                    let (stmt, decl) = self.add_stmt(&d, &acc, nxt, &sum);
                    pre.push(stmt);
                    self.decls.insert(sum.clone(), decl);
                    acc = sum;
                }
                self.partials.insert(var.to_string(), vec![acc.clone()]);
                Ok(Some(acc))
            }
        }
    }

    fn add_stmt(&self, d: &TensorDecl, a: &str, b: &str, res: &str) -> (Stmt, TensorDecl) {
        let decl = TensorDecl {
            name: res.to_string(),
            role: d.role,
            slice_rows: d.slice_rows,
            cols: d.cols,
            kind: DeclKind::Local,
        };
        let stmt = match d.role {
            Role::Edge => Stmt::Scope(Scope {
                kind: ScopeKind::Edges,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Binary(BinaryKind::Add),
                    vr(res, Access::Edge),
                    vec![vr(a, Access::Edge), vr(b, Access::Edge)],
                ))],
            }),
            Role::Node { .. } => Stmt::Scope(Scope {
                kind: ScopeKind::DstNodes,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Binary(BinaryKind::Add),
                    vr(res, Access::Node),
                    vec![vr(a, Access::Node), vr(b, Access::Node)],
                ))],
            }),
            _ => Stmt::Op(self.mk(
                OpKind::Binary(BinaryKind::Add),
                vr(res, Access::Plain),
                vec![vr(a, Access::Plain), vr(b, Access::Plain)],
            )),
        };
        (stmt, decl)
    }

    fn rename_stmt(&self, d: &TensorDecl, src: &str, dst: &str) -> Stmt {
        match d.role {
            Role::Edge => Stmt::Scope(Scope {
                kind: ScopeKind::Edges,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Unary(UnaryKind::Identity),
                    vr(dst, Access::Edge),
                    vec![vr(src, Access::Edge)],
                ))],
            }),
            Role::Node { .. } => Stmt::Scope(Scope {
                kind: ScopeKind::DstNodes,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Unary(UnaryKind::Identity),
                    vr(dst, Access::Node),
                    vec![vr(src, Access::Node)],
                ))],
            }),
            _ => Stmt::Op(self.mk(
                OpKind::Unary(UnaryKind::Identity),
                vr(dst, Access::Plain),
                vec![vr(src, Access::Plain)],
            )),
        }
    }

    fn scale_zero_stmt(&self, d: &TensorDecl, dst: &str) -> Stmt {
        match d.role {
            Role::Edge => Stmt::Scope(Scope {
                kind: ScopeKind::Edges,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Unary(UnaryKind::Scale(0.0)),
                    vr(dst, Access::Edge),
                    vec![vr(&d.name, Access::Edge)],
                ))],
            }),
            Role::Node { .. } => Stmt::Scope(Scope {
                kind: ScopeKind::DstNodes,
                body: vec![Stmt::Op(self.mk(
                    OpKind::Unary(UnaryKind::Scale(0.0)),
                    vr(dst, Access::Node),
                    vec![vr(&d.name, Access::Node)],
                ))],
            }),
            _ => Stmt::Op(self.mk(
                OpKind::Unary(UnaryKind::Scale(0.0)),
                vr(dst, Access::Plain),
                vec![vr(&d.name, Access::Plain)],
            )),
        }
    }

    /// Register `partial` (an in-scope rowwise value) as a gradient
    /// contribution of the variable read as `arg`. Reads through node or
    /// weight accessors scatter via `AccumulateSum`.
    fn route_partial(
        &mut self,
        arg: &VarRef,
        partial: String,
        partial_cols: usize,
        scope: ScopeKind,
        body: &mut Vec<OpCall>,
    ) {
        match arg.access {
            Access::Edge | Access::Node => {
                self.note_decl(&partial, role_for(scope, arg.access), 1, partial_cols);
                self.partials.entry(arg.name.clone()).or_default().push(partial);
            }
            Access::Src | Access::Dst => {
                self.note_decl(&partial, Role::Edge, 1, partial_cols);
                let acc = self.fresh_name(&arg.name);
                self.note_decl(&acc, Role::node(), 1, partial_cols);
                body.push(self.mk(
                    OpKind::AccumulateSum,
                    vr(&acc, arg.access),
                    vec![vr(&partial, Access::Edge)],
                ));
                self.partials.entry(arg.name.clone()).or_default().push(acc);
            }
            Access::EType | Access::NType | Access::SrcNType | Access::DstNType
            | Access::SingleType => {
                let row_access = if scope.is_node_scope() {
                    Access::Node
                } else {
                    Access::Edge
                };
                self.note_decl(&partial, role_for(scope, row_access), 1, partial_cols);
                let wd = self.decls[&arg.name].clone();
                let acc = self.fresh_name(&arg.name);
                let decl = TensorDecl {
                    name: acc.clone(),
                    role: wd.role,
                    slice_rows: wd.slice_rows,
                    cols: wd.cols,
                    kind: DeclKind::Local,
                };
                self.locals.push(decl.clone());
                self.decls.insert(acc.clone(), decl);
                body.push(self.mk(
                    OpKind::AccumulateSum,
                    vr(&acc, arg.access),
                    vec![vr(&partial, row_access)],
                ));
                self.partials.entry(arg.name.clone()).or_default().push(acc);
            }
            Access::Plain => {
                // Whole-tensor partial produced by a top-level adjoint.
                let wd = self.decls[&arg.name].clone();
                self.note_decl(&partial, wd.role, wd.slice_rows, wd.cols);
                self.partials.entry(arg.name.clone()).or_default().push(partial);
            }
        }
    }

    fn note_decl(&mut self, name: &str, role: Role, slice_rows: usize, cols: usize) {
        self.decls.entry(name.to_string()).or_insert(TensorDecl {
            name: name.to_string(),
            role,
            slice_rows,
            cols,
            kind: DeclKind::Local,
        });
    }

    fn cols_of(&self, name: &str) -> usize {
        self.decls[name].cols
    }

    /// Adjoints of an in-scope (edge or node loop) operation. `pre`
    /// collects statements that must run before the enclosing backward
    /// scope; `body` is the backward scope under construction.
    fn adjoint_in_scope(
        &mut self,
        op: &OpCall,
        scope: ScopeKind,
        pre: &mut Vec<Stmt>,
        body: &mut Vec<OpCall>,
    ) -> Result<(), IrError> {
        let row_access = if scope.is_node_scope() {
            Access::Node
        } else {
            Access::Edge
        };
        if op.op == OpKind::AccumulateSum {
            // Broadcast the target's gradient back to the rows that fed it.
            let Some(g_target) = self.combined_grad(&op.result.name, pre)? else {
                return Ok(());
            };
            let arg = &op.args[0];
            let broadcast_access = match op.result.access {
                Access::Src => Access::Src,
                Access::Dst => Access::Dst,
                _ => unreachable!("weight accumulation rejected earlier"),
            };
            let p = self.fresh_name(&arg.name);
            let cols = self.cols_of(&arg.name);
            body.push(self.mk(
                OpKind::Unary(UnaryKind::Identity),
                vr(&p, row_access),
                vec![vr(&g_target, broadcast_access)],
            ));
            self.route_partial(arg, p, cols, scope, body);
            return Ok(());
        }

        // Gradient of this op's result; edge/node combines may emit adds
        // into the current body (their inputs were produced earlier in it).
        let g = {
            let mut local_pre = Vec::new();
            let g = self.combined_grad(&op.result.name, &mut local_pre)?;
            for st in local_pre {
                match st {
                    // Node scopes are interchangeable: both iterate all
                    // node ids, so same-scope combines inline here.
                    Stmt::Scope(sc)
                        if sc.kind == scope
                            || (sc.kind.is_node_scope() && scope.is_node_scope()) =>
                    {
                        for inner in sc.body {
                            let Stmt::Op(o) = inner else { unreachable!() };
                            body.push(o);
                        }
                    }
                    other => pre.push(other),
                }
            }
            g
        };
        let Some(g) = g else { return Ok(()) };
        let g_cols = self.cols_of(&op.result.name);

        match &op.op {
            OpKind::TypedLinear { transpose_weight } => {
                let (x, w) = (&op.args[0], &op.args[1]);
                let wd = self.decls[&w.name].clone();
                // input gradient: g * W^T (or g * W when forward was transposed)
                let px = self.fresh_name(&x.name);
                let x_cols = if *transpose_weight { wd.cols } else { wd.slice_rows };
                body.push(self.mk(
                    OpKind::TypedLinear {
                        transpose_weight: !*transpose_weight,
                    },
                    vr(&px, row_access),
                    vec![vr(&g, row_access), w.clone()],
                ));
                self.route_partial(x, px, x_cols, scope, body);
                // weight gradient: outer product of input row and gradient
                // row, flattened to the slice layout.
                let pw = self.fresh_name(&w.name);
                let (a, b) = if *transpose_weight {
                    (vr(&g, row_access), x.clone())
                } else {
                    (x.clone(), vr(&g, row_access))
                };
                body.push(self.mk(OpKind::OuterProd, vr(&pw, row_access), vec![a, b]));
                self.route_partial(w, pw, wd.slice_rows * wd.cols, scope, body);
            }
            OpKind::DotProd => {
                let (a, b) = (&op.args[0], &op.args[1]);
                for (this, other) in [(a, b), (b, a)] {
                    let p = self.fresh_name(&this.name);
                    let cols = arg_view_cols(&self.decls, other);
                    body.push(self.mk(
                        OpKind::Binary(BinaryKind::Mul),
                        vr(&p, row_access),
                        vec![other.clone(), vr(&g, row_access)],
                    ));
                    self.route_partial(this, p, cols, scope, body);
                }
            }
            OpKind::OuterProd => {
                let (a, b) = (&op.args[0], &op.args[1]);
                let (m, n) = (
                    arg_view_cols(&self.decls, a),
                    arg_view_cols(&self.decls, b),
                );
                let pa = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::RowwiseMatVec {
                        rows: m,
                        cols: n,
                        transpose: false,
                    },
                    vr(&pa, row_access),
                    vec![vr(&g, row_access), b.clone()],
                ));
                self.route_partial(a, pa, m, scope, body);
                let pb = self.fresh_name(&b.name);
                body.push(self.mk(
                    OpKind::RowwiseMatVec {
                        rows: m,
                        cols: n,
                        transpose: true,
                    },
                    vr(&pb, row_access),
                    vec![vr(&g, row_access), a.clone()],
                ));
                self.route_partial(b, pb, n, scope, body);
            }
            OpKind::Unary(UnaryKind::Identity) => {
                self.route_identity(&op.args[0], &g, g_cols, scope, body);
            }
            OpKind::Unary(UnaryKind::Exp) => {
                let a = &op.args[0];
                let p = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Binary(BinaryKind::Mul),
                    vr(&p, row_access),
                    vec![vr(&g, row_access), vr(&op.result.name, row_access)],
                ));
                self.route_partial(a, p, g_cols, scope, body);
            }
            OpKind::Unary(UnaryKind::LeakyRelu { slope }) => {
                let a = &op.args[0];
                let mask = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Unary(UnaryKind::LeakyReluGrad { slope: *slope }),
                    vr(&mask, row_access),
                    vec![a.clone()],
                ));
                self.note_decl(&mask, role_for(scope, row_access), 1, g_cols);
                let p = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Binary(BinaryKind::Mul),
                    vr(&p, row_access),
                    vec![vr(&g, row_access), vr(&mask, row_access)],
                ));
                self.route_partial(a, p, g_cols, scope, body);
            }
            OpKind::Unary(UnaryKind::Scale(c)) => {
                let a = &op.args[0];
                let p = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Unary(UnaryKind::Scale(*c)),
                    vr(&p, row_access),
                    vec![vr(&g, row_access)],
                ));
                self.route_partial(a, p, g_cols, scope, body);
            }
            OpKind::Binary(BinaryKind::Add) => {
                for a in &op.args {
                    self.route_identity(a, &g, g_cols, scope, body);
                }
            }
            OpKind::Binary(BinaryKind::Sub) => {
                self.route_identity(&op.args[0], &g, g_cols, scope, body);
                let b = &op.args[1];
                let p = self.fresh_name(&b.name);
                body.push(self.mk(
                    OpKind::Unary(UnaryKind::Scale(-1.0)),
                    vr(&p, row_access),
                    vec![vr(&g, row_access)],
                ));
                self.route_partial(b, p, g_cols, scope, body);
            }
            OpKind::Binary(BinaryKind::Mul) => {
                let (a, b) = (&op.args[0], &op.args[1]);
                let (wa, wb) = (
                    arg_view_cols(&self.decls, a),
                    arg_view_cols(&self.decls, b),
                );
                // d/da: g ⊙ b (broadcast handles the per-row scalar case)
                let pa = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Binary(BinaryKind::Mul),
                    vr(&pa, row_access),
                    vec![vr(&g, row_access), b.clone()],
                ));
                self.route_partial(a, pa, wa, scope, body);
                // d/db: g ⊙ a, reduced over the row when b was a scalar
                let pb = self.fresh_name(&b.name);
                if wb == 1 && wa > 1 {
                    body.push(self.mk(
                        OpKind::DotProd,
                        vr(&pb, row_access),
                        vec![vr(&g, row_access), a.clone()],
                    ));
                } else {
                    body.push(self.mk(
                        OpKind::Binary(BinaryKind::Mul),
                        vr(&pb, row_access),
                        vec![vr(&g, row_access), a.clone()],
                    ));
                }
                self.route_partial(b, pb, wb, scope, body);
            }
            OpKind::Binary(BinaryKind::Div) => {
                let (a, b) = (&op.args[0], &op.args[1]);
                let (wa, wb) = (
                    arg_view_cols(&self.decls, a),
                    arg_view_cols(&self.decls, b),
                );
                let pa = self.fresh_name(&a.name);
                body.push(self.mk(
                    OpKind::Binary(BinaryKind::Div),
                    vr(&pa, row_access),
                    vec![vr(&g, row_access), b.clone()],
                ));
                self.route_partial(a, pa, wa, scope, body);
                // d/db = -(g ⊙ y)/b, reduced over the row when b is scalar.
                let gy = self.fresh_name(&b.name);
                if wb == 1 && wa > 1 {
                    body.push(self.mk(
                        OpKind::DotProd,
                        vr(&gy, row_access),
                        vec![vr(&g, row_access), vr(&op.result.name, row_access)],
                    ));
                } else {
                    body.push(self.mk(
                        OpKind::Binary(BinaryKind::Mul),
                        vr(&gy, row_access),
                        vec![vr(&g, row_access), vr(&op.result.name, row_access)],
                    ));
                }
                self.note_decl(&gy, role_for(scope, row_access), 1, wb);
                let q = self.fresh_name(&b.name);
                body.push(self.mk(
                    OpKind::Binary(BinaryKind::Div),
                    vr(&q, row_access),
                    vec![vr(&gy, row_access), b.clone()],
                ));
                self.note_decl(&q, role_for(scope, row_access), 1, wb);
                let pb = self.fresh_name(&b.name);
                body.push(self.mk(
                    OpKind::Unary(UnaryKind::Scale(-1.0)),
                    vr(&pb, row_access),
                    vec![vr(&q, row_access)],
                ));
                self.route_partial(b, pb, wb, scope, body);
            }
            OpKind::Concat => {
                let mut off = 0usize;
                for a in &op.args {
                    let w = arg_view_cols(&self.decls, a);
                    let p = self.fresh_name(&a.name);
                    body.push(self.mk(
                        OpKind::SliceCols {
                            from: off,
                            to: off + w,
                        },
                        vr(&p, row_access),
                        vec![vr(&g, row_access)],
                    ));
                    self.route_partial(a, p, w, scope, body);
                    off += w;
                }
            }
            other => {
                return Err(IrError::NotDifferentiable(other.label()));
            }
        }
        Ok(())
    }

    fn route_identity(
        &mut self,
        arg: &VarRef,
        g: &str,
        g_cols: usize,
        scope: ScopeKind,
        body: &mut Vec<OpCall>,
    ) {
        // A direct pass-through for plainly-read rows; indexed reads need
        // a materialized copy so the scatter has an operand to sum.
        match arg.access {
            Access::Edge | Access::Node => {
                self.partials
                    .entry(arg.name.clone())
                    .or_default()
                    .push(g.to_string());
            }
            _ => {
                let row_access = if scope.is_node_scope() {
                    Access::Node
                } else {
                    Access::Edge
                };
                let p = self.fresh_name(&arg.name);
                body.push(self.mk(
                    OpKind::Unary(UnaryKind::Identity),
                    vr(&p, row_access),
                    vec![vr(g, row_access)],
                ));
                self.route_partial(arg, p, g_cols, scope, body);
            }
        }
    }

    /// Adjoints of a top-level operation (weight-weight products and
    /// weight bookkeeping).
    fn adjoint_top_level(&mut self, op: &OpCall, out: &mut Vec<Stmt>) -> Result<(), IrError> {
        let Some(g) = self.combined_grad(&op.result.name, out)? else {
            return Ok(());
        };
        match &op.op {
            OpKind::WeightWeightProduct(WwKind::MatVec) => {
                // ww[t] = W[t] * v[t]:  gW[t] = g[t] ⊗ v[t],  gv[t] = g[t] * W[t]
                let (w, v) = (&op.args[0], &op.args[1]);
                let pw = self.fresh_name(&w.name);
                out.push(Stmt::Op(self.mk(
                    OpKind::WeightWeightProduct(WwKind::VecOuter),
                    vr(&pw, Access::Plain),
                    vec![vr(&g, Access::Plain), v.clone()],
                )));
                let wd = self.decls[&w.name].clone();
                self.note_decl(&pw, wd.role, wd.slice_rows, wd.cols);
                self.partials.entry(w.name.clone()).or_default().push(pw);

                let pv = self.fresh_name(&v.name);
                out.push(Stmt::Op(self.mk(
                    OpKind::WeightWeightProduct(WwKind::VecMat),
                    vr(&pv, Access::Plain),
                    vec![w.clone(), vr(&g, Access::Plain)],
                )));
                let vd = self.decls[&v.name].clone();
                self.note_decl(&pv, vd.role, vd.slice_rows, vd.cols);
                self.partials.entry(v.name.clone()).or_default().push(pv);
            }
            OpKind::Reshape { .. } => {
                let a = &op.args[0];
                let ad = self.decls[&a.name].clone();
                let p = self.fresh_name(&a.name);
                out.push(Stmt::Op(self.mk(
                    OpKind::Reshape {
                        slice_rows: ad.slice_rows,
                        cols: ad.cols,
                    },
                    vr(&p, Access::Plain),
                    vec![vr(&g, Access::Plain)],
                )));
                self.note_decl(&p, ad.role, ad.slice_rows, ad.cols);
                self.partials.entry(a.name.clone()).or_default().push(p);
            }
            OpKind::Unary(UnaryKind::Scale(c)) => {
                let a = &op.args[0];
                let ad = self.decls[&a.name].clone();
                let p = self.fresh_name(&a.name);
                out.push(Stmt::Op(self.mk(
                    OpKind::Unary(UnaryKind::Scale(*c)),
                    vr(&p, Access::Plain),
                    vec![vr(&g, Access::Plain)],
                )));
                self.note_decl(&p, ad.role, ad.slice_rows, ad.cols);
                self.partials.entry(a.name.clone()).or_default().push(p);
            }
            OpKind::Binary(BinaryKind::Add) => {
                for a in &op.args {
                    self.partials
                        .entry(a.name.clone())
                        .or_default()
                        .push(g.clone());
                }
            }
            other => return Err(IrError::NotDifferentiable(other.label())),
        }
        Ok(())
    }
}

fn role_for(scope: ScopeKind, access: Access) -> Role {
    match access {
        Access::Edge => Role::Edge,
        Access::Node => Role::node(),
        _ => {
            let _ = scope;
            Role::node()
        }
    }
}

fn arg_view_cols(decls: &BTreeMap<String, TensorDecl>, a: &VarRef) -> usize {
    let d = &decls[&a.name];
    if a.access.is_type_select() || a.access == Access::Plain {
        d.slice_rows * d.cols
    } else {
        d.cols
    }
}
