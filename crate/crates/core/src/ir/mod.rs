//! Loop-nest IR over graph scopes.
//!
//! A program is an ordered list of statements; a statement is either a
//! tensor operation or a scope (for-each over edges or nodes, with
//! neighbor scopes nesting inside node scopes). Variables are associated
//! with nodes, edges, or typed weights: the IR deliberately says nothing
//! about how a variable is laid out in memory; materialization is decided
//! at lowering time.
//!
//! Operations reference variables together with an accessor: `h@src` is
//! the source-node row of `h` seen from the current edge, `W@etype` the
//! weight slice selected by the edge's type, and so on. Reductions are
//! explicit `AccumulateSum` statements whose result accessor names the
//! scatter target (`@dst` for node aggregation, `@etype` for per-type
//! weight accumulation in emitted backward code).

pub mod autodiff;
pub mod flops;
pub mod passes;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Feature dimensions and type counts a model is instantiated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimsConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub edge_types: usize,
    pub node_types: usize,
}

impl DimsConfig {
    pub fn new(in_dim: usize, out_dim: usize, edge_types: usize, node_types: usize) -> Self {
        assert!(in_dim > 0 && out_dim > 0 && edge_types > 0 && node_types > 0);
        Self {
            in_dim,
            out_dim,
            edge_types,
            node_types,
        }
    }
}

/// Loop kinds. Neighbor scopes are only legal nested inside a node scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScopeKind {
    Edges,
    DstNodes,
    SrcNodes,
    IncomingEdges,
    OutgoingEdges,
}

impl ScopeKind {
    pub fn is_node_scope(self) -> bool {
        matches!(self, ScopeKind::DstNodes | ScopeKind::SrcNodes)
    }

    pub fn label(self) -> &'static str {
        match self {
            ScopeKind::Edges => "edges",
            ScopeKind::DstNodes => "dst_nodes",
            ScopeKind::SrcNodes => "src_nodes",
            ScopeKind::IncomingEdges => "incoming_edges",
            ScopeKind::OutgoingEdges => "outgoing_edges",
        }
    }
}

/// How an operand or result row is located from the current loop iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Access {
    /// Whole tensor (top-level ops on weights).
    Plain,
    /// Source-node row of the current edge.
    Src,
    /// Destination-node row of the current edge.
    Dst,
    /// Row of the current edge.
    Edge,
    /// Weight slice selected by the current edge's type.
    EType,
    /// Weight slice selected by the source node's type.
    SrcNType,
    /// Weight slice selected by the destination node's type.
    DstNType,
    /// Row of the current node (node scopes).
    Node,
    /// Weight slice selected by the current node's type (node scopes).
    NType,
    /// Fixed slice 0 of a single-type weight.
    SingleType,
}

impl Access {
    pub fn suffix(self) -> &'static str {
        match self {
            Access::Plain => "",
            Access::Src => "@src",
            Access::Dst => "@dst",
            Access::Edge => "@edge",
            Access::EType => "@etype",
            Access::SrcNType => "@stype",
            Access::DstNType => "@dtype",
            Access::Node => "@node",
            Access::NType => "@ntype",
            Access::SingleType => "@t0",
        }
    }

    /// True when the accessor selects a weight slice by some type.
    pub fn is_type_select(self) -> bool {
        matches!(
            self,
            Access::EType | Access::SrcNType | Access::DstNType | Access::NType | Access::SingleType
        )
    }
}

/// A variable reference with its accessor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarRef {
    pub name: String,
    pub access: Access,
}

impl VarRef {
    pub fn new(name: impl Into<String>, access: Access) -> Self {
        Self {
            name: name.into(),
            access,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Identity,
    Exp,
    LeakyRelu { slope: f64 },
    /// Multiply by a constant.
    Scale(f64),
    /// Pointwise derivative of leakyrelu, used by emitted backward code.
    LeakyReluGrad { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Per-type product between weight tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WwKind {
    /// `out[t] = W[t] * v[t]`: (s x c) times (c) giving (s).
    MatVec,
    /// `out[t] = v[t] * W[t]`: (s) times (s x c) giving (c).
    VecMat,
    /// `out[t] = a[t] ⊗ b[t]`: (m) outer (n) giving (m x n).
    VecOuter,
}

/// Tensor operations. `TypedLinear` selects its weight slice per row via
/// the weight operand's accessor.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    TypedLinear { transpose_weight: bool },
    OuterProd,
    DotProd,
    Unary(UnaryKind),
    Binary(BinaryKind),
    AccumulateSum,
    /// Reinterpret a weight tensor's slices as `slice_rows x cols`.
    Reshape { slice_rows: usize, cols: usize },
    Concat,
    WeightWeightProduct(WwKind),
    /// Per-row product of a flattened `rows x cols` matrix with a vector;
    /// used by emitted backward code for outer-product adjoints.
    RowwiseMatVec {
        rows: usize,
        cols: usize,
        transpose: bool,
    },
    /// Column slice `[from, to)`, the adjoint of `Concat`.
    SliceCols { from: usize, to: usize },
}

impl OpKind {
    pub fn label(&self) -> String {
        match self {
            OpKind::TypedLinear { transpose_weight: false } => "typed_linear".into(),
            OpKind::TypedLinear { transpose_weight: true } => "typed_linear_t".into(),
            OpKind::OuterProd => "outer_prod".into(),
            OpKind::DotProd => "dot_prod".into(),
            OpKind::Unary(UnaryKind::Identity) => "identity".into(),
            OpKind::Unary(UnaryKind::Exp) => "exp".into(),
            OpKind::Unary(UnaryKind::LeakyRelu { slope }) => format!("leakyrelu[{slope}]"),
            OpKind::Unary(UnaryKind::Scale(c)) => format!("scale[{c}]"),
            OpKind::Unary(UnaryKind::LeakyReluGrad { slope }) => {
                format!("leakyrelu_grad[{slope}]")
            }
            OpKind::Binary(BinaryKind::Add) => "add".into(),
            OpKind::Binary(BinaryKind::Sub) => "sub".into(),
            OpKind::Binary(BinaryKind::Mul) => "mul".into(),
            OpKind::Binary(BinaryKind::Div) => "div".into(),
            OpKind::AccumulateSum => "accumulate_sum".into(),
            OpKind::Reshape { slice_rows, cols } => format!("reshape[{slice_rows}x{cols}]"),
            OpKind::Concat => "concat".into(),
            OpKind::WeightWeightProduct(WwKind::MatVec) => "ww_mat_vec".into(),
            OpKind::WeightWeightProduct(WwKind::VecMat) => "ww_vec_mat".into(),
            OpKind::WeightWeightProduct(WwKind::VecOuter) => "ww_vec_outer".into(),
            OpKind::RowwiseMatVec {
                rows,
                cols,
                transpose,
            } => format!(
                "rowwise_mat_vec{}[{rows}x{cols}]",
                if *transpose { "_t" } else { "" }
            ),
            OpKind::SliceCols { from, to } => format!("slice_cols[{from}:{to}]"),
        }
    }
}

/// One operation: `result <- op(args)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCall {
    pub op: OpKind,
    pub result: VarRef,
    pub args: Vec<VarRef>,
    /// For emitted backward code: index of the forward operation (in
    /// pre-order) this adjoint was derived from.
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Op(OpCall),
    Scope(Scope),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scope {
    pub kind: ScopeKind,
    pub body: Vec<Stmt>,
}

/// Layout role of a declared tensor. Rows are implied by the role; only
/// feature dimensions are explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// One row per node, optionally restricted to a node type.
    Node { ntype: Option<usize> },
    /// One row per edge (scalar-per-edge when `cols == 1`).
    Edge,
    /// Weight with one slice per edge type.
    WeightEType { types: usize },
    /// Weight with one slice per node type.
    WeightNType { types: usize },
    /// Weight with a single slice.
    WeightSingle,
}

impl Role {
    pub fn node() -> Role {
        Role::Node { ntype: None }
    }

    pub fn is_weight(self) -> bool {
        matches!(
            self,
            Role::WeightEType { .. } | Role::WeightNType { .. } | Role::WeightSingle
        )
    }

    pub fn weight_types(self) -> usize {
        match self {
            Role::WeightEType { types } | Role::WeightNType { types } => types,
            Role::WeightSingle => 1,
            _ => panic!("not a weight role"),
        }
    }

    fn label(self) -> String {
        match self {
            Role::Node { ntype: None } => "node".into(),
            Role::Node { ntype: Some(t) } => format!("node:{t}"),
            Role::Edge => "edge".into(),
            Role::WeightEType { types } => format!("wtype_e[{types}]"),
            Role::WeightNType { types } => format!("wtype_n[{types}]"),
            Role::WeightSingle => "wsingle".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeclKind {
    /// Non-trainable input (features, normalization scalars, seeds).
    Input,
    /// Trainable parameter.
    Weight,
    /// Defined by the program.
    Local,
}

/// Declared shape of a tensor: role plus `slice_rows x cols` per slice
/// (`slice_rows` is 1 for everything except matrix weights).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub role: Role,
    pub slice_rows: usize,
    pub cols: usize,
    pub kind: DeclKind,
}

impl TensorDecl {
    pub fn node(name: impl Into<String>, cols: usize) -> Self {
        Self {
            name: name.into(),
            role: Role::node(),
            slice_rows: 1,
            cols,
            kind: DeclKind::Input,
        }
    }

    pub fn edge(name: impl Into<String>, cols: usize) -> Self {
        Self {
            name: name.into(),
            role: Role::Edge,
            slice_rows: 1,
            cols,
            kind: DeclKind::Input,
        }
    }

    pub fn weight_etype(name: impl Into<String>, types: usize, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            role: Role::WeightEType { types },
            slice_rows: rows,
            cols,
            kind: DeclKind::Weight,
        }
    }

    pub fn weight_ntype(name: impl Into<String>, types: usize, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            role: Role::WeightNType { types },
            slice_rows: rows,
            cols,
            kind: DeclKind::Weight,
        }
    }

    pub fn weight_single(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            role: Role::WeightSingle,
            slice_rows: rows,
            cols,
            kind: DeclKind::Weight,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IrError {
    #[error("variable {0} used before definition")]
    UseBeforeDef(String),
    #[error("variable {0} defined twice")]
    DoubleDef(String),
    #[error("{op} not allowed: {msg}")]
    BadOp { op: String, msg: String },
    #[error("accessor {access} not valid in {ctx}")]
    BadAccess { access: String, ctx: String },
    #[error("shape mismatch at {at}: {msg}")]
    BadShape { at: String, msg: String },
    #[error("unknown output {0}")]
    UnknownOutput(String),
    #[error("operation {0} is not differentiable")]
    NotDifferentiable(String),
}

/// A layer program: input declarations, statements, declared outputs.
///
/// `locals` pre-declares accumulation targets whose shape cannot be
/// inferred from a single statement (emitted backward code declares its
/// per-type gradient accumulators here); hand-written programs leave it
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub name: String,
    pub inputs: Vec<TensorDecl>,
    pub locals: Vec<TensorDecl>,
    pub stmts: Vec<Stmt>,
    pub outputs: Vec<String>,
}

impl Program {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            inputs: Vec::new(),
            locals: Vec::new(),
            stmts: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input_decl(&self, name: &str) -> Option<&TensorDecl> {
        self.inputs.iter().find(|d| d.name == name)
    }

    /// Visit every operation in pre-order together with its scope context
    /// (`None` at top level).
    pub fn visit_ops<'a>(&'a self, mut f: impl FnMut(usize, Option<ScopeKind>, &'a OpCall)) {
        let mut idx = 0;
        fn walk<'a>(
            stmts: &'a [Stmt],
            ctx: Option<ScopeKind>,
            idx: &mut usize,
            f: &mut impl FnMut(usize, Option<ScopeKind>, &'a OpCall),
        ) {
            for s in stmts {
                match s {
                    Stmt::Op(op) => {
                        f(*idx, ctx, op);
                        *idx += 1;
                    }
                    Stmt::Scope(sc) => walk(&sc.body, Some(sc.kind), idx, f),
                }
            }
        }
        walk(&self.stmts, None, &mut idx, &mut f);
    }

    pub fn num_ops(&self) -> usize {
        let mut n = 0;
        self.visit_ops(|_, _, _| n += 1);
        n
    }

    /// Infer the declaration of every variable (inputs as declared,
    /// locals from the operation that defines them), validating the
    /// program along the way.
    pub fn infer_decls(&self) -> Result<BTreeMap<String, TensorDecl>, IrError> {
        let mut decls: BTreeMap<String, TensorDecl> = BTreeMap::new();
        for d in &self.inputs {
            if decls.insert(d.name.clone(), d.clone()).is_some() {
                return Err(IrError::DoubleDef(d.name.clone()));
            }
        }
        // Accumulation targets are defined once but written by several
        // statements; remember which names those are. Pre-declared locals
        // are all accumulation targets.
        let mut accum_targets: BTreeMap<String, ()> = BTreeMap::new();
        for d in &self.locals {
            if decls.insert(d.name.clone(), d.clone()).is_some() {
                return Err(IrError::DoubleDef(d.name.clone()));
            }
            accum_targets.insert(d.name.clone(), ());
        }
        self.check_stmts(&self.stmts, None, &mut decls, &mut accum_targets)?;
        for out in &self.outputs {
            if !decls.contains_key(out) {
                return Err(IrError::UnknownOutput(out.clone()));
            }
        }
        Ok(decls)
    }

    pub fn validate(&self) -> Result<(), IrError> {
        self.infer_decls().map(|_| ())
    }

    fn check_stmts(
        &self,
        stmts: &[Stmt],
        ctx: Option<ScopeKind>,
        decls: &mut BTreeMap<String, TensorDecl>,
        accum_targets: &mut BTreeMap<String, ()>,
    ) -> Result<(), IrError> {
        for s in stmts {
            match s {
                Stmt::Scope(sc) => {
                    match sc.kind {
                        ScopeKind::Edges | ScopeKind::DstNodes | ScopeKind::SrcNodes => {
                            if ctx.is_some() {
                                return Err(IrError::BadOp {
                                    op: sc.kind.label().into(),
                                    msg: "top-level scopes cannot nest".into(),
                                });
                            }
                        }
                        ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges => {
                            if !matches!(ctx, Some(k) if k.is_node_scope()) {
                                return Err(IrError::BadOp {
                                    op: sc.kind.label().into(),
                                    msg: "neighbor scopes must nest in a node scope".into(),
                                });
                            }
                        }
                    }
                    self.check_stmts(&sc.body, Some(sc.kind), decls, accum_targets)?;
                }
                Stmt::Op(op) => self.check_op(op, ctx, decls, accum_targets)?,
            }
        }
        Ok(())
    }

    fn check_op(
        &self,
        op: &OpCall,
        ctx: Option<ScopeKind>,
        decls: &mut BTreeMap<String, TensorDecl>,
        accum_targets: &mut BTreeMap<String, ()>,
    ) -> Result<(), IrError> {
        let neighbor_ctx = matches!(
            ctx,
            Some(ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges)
        );
        let edge_ctx = matches!(ctx, Some(ScopeKind::Edges)) || neighbor_ctx;
        let node_ctx = matches!(ctx, Some(k) if k.is_node_scope());
        // Operand validation + shape lookup.
        let mut arg_shapes = Vec::new();
        for a in &op.args {
            let d = decls
                .get(&a.name)
                .ok_or_else(|| IrError::UseBeforeDef(a.name.clone()))?;
            let ok = match a.access {
                Access::Plain => ctx.is_none() || d.role.is_weight(),
                Access::Src | Access::Dst => edge_ctx && matches!(d.role, Role::Node { .. }),
                Access::Edge => edge_ctx && d.role == Role::Edge,
                Access::EType => edge_ctx && matches!(d.role, Role::WeightEType { .. }),
                Access::SrcNType | Access::DstNType => {
                    edge_ctx && matches!(d.role, Role::WeightNType { .. })
                }
                // the owning node stays visible inside its neighbor scopes
                Access::Node => (node_ctx || neighbor_ctx) && matches!(d.role, Role::Node { .. }),
                Access::NType => {
                    (node_ctx || neighbor_ctx) && matches!(d.role, Role::WeightNType { .. })
                }
                Access::SingleType => d.role == Role::WeightSingle,
            };
            if !ok {
                return Err(IrError::BadAccess {
                    access: format!("{}{}", a.name, a.access.suffix()),
                    ctx: ctx.map_or("top level".into(), |k| k.label().to_string()),
                });
            }
            arg_shapes.push((d.role, d.slice_rows, d.cols));
        }
        // Row-view width of each operand as the op sees it.
        let width = |i: usize| -> usize {
            let (_, sr, c) = arg_shapes[i];
            if op.args[i].access == Access::Plain || op.args[i].access.is_type_select() {
                sr * c
            } else {
                c
            }
        };

        let bad = |msg: &str| -> IrError {
            IrError::BadOp {
                op: op.op.label(),
                msg: msg.into(),
            }
        };

        // Result declaration implied by the op.
        let (res_role, res_slice_rows, res_cols): (Role, usize, usize) = match &op.op {
            OpKind::TypedLinear { transpose_weight } => {
                if op.args.len() != 2 {
                    return Err(bad("takes (input, weight)"));
                }
                let (_, w_rows, w_cols) = arg_shapes[1];
                if !op.args[1].access.is_type_select() {
                    return Err(bad("weight operand must be type-selected"));
                }
                let (d_in, d_out) = if *transpose_weight {
                    (w_cols, w_rows)
                } else {
                    (w_rows, w_cols)
                };
                if width(0) != d_in {
                    return Err(IrError::BadShape {
                        at: op.result.name.clone(),
                        msg: format!("input width {} vs weight {}", width(0), d_in),
                    });
                }
                self.rowwise_result(op, ctx, d_out)?
            }
            OpKind::OuterProd => {
                if op.args.len() != 2 {
                    return Err(bad("takes (a, b)"));
                }
                self.rowwise_result(op, ctx, width(0) * width(1))?
            }
            OpKind::DotProd => {
                if op.args.len() != 2 || width(0) != width(1) {
                    return Err(IrError::BadShape {
                        at: op.result.name.clone(),
                        msg: "dot_prod operands must have equal width".into(),
                    });
                }
                self.rowwise_result(op, ctx, 1)?
            }
            OpKind::Unary(_) => {
                if op.args.len() != 1 {
                    return Err(bad("takes one operand"));
                }
                if ctx.is_none() {
                    // Whole-tensor map (weight gradients); shape preserved.
                    let (role, sr, c) = arg_shapes[0];
                    (role, sr, c)
                } else {
                    self.rowwise_result(op, ctx, width(0))?
                }
            }
            OpKind::Binary(_) => {
                if op.args.len() != 2 {
                    return Err(bad("takes (a, b)"));
                }
                if ctx.is_none() {
                    // Whole-tensor elementwise; shapes must match exactly.
                    if arg_shapes[0] != arg_shapes[1] {
                        return Err(IrError::BadShape {
                            at: op.result.name.clone(),
                            msg: "top-level binary wants identical shapes".into(),
                        });
                    }
                    arg_shapes[0]
                } else {
                    let (wa, wb) = (width(0), width(1));
                    // equal widths, or per-row scalar broadcast on the right
                    let w = if wa == wb || wb == 1 {
                        wa
                    } else {
                        return Err(IrError::BadShape {
                            at: op.result.name.clone(),
                            msg: format!("cannot broadcast widths {wa} and {wb}"),
                        });
                    };
                    self.rowwise_result(op, ctx, w)?
                }
            }
            OpKind::AccumulateSum => {
                if op.args.len() != 1 {
                    return Err(bad("takes one operand"));
                }
                let w = width(0);
                // Role category the scatter target must have.
                let weight_target = match (ctx, op.result.access) {
                    (Some(ScopeKind::Edges), Access::Src | Access::Dst)
                    | (Some(ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges), Access::Node) => {
                        false
                    }
                    (Some(ScopeKind::Edges), Access::EType) | (Some(_), Access::SingleType) => true,
                    (Some(k), Access::NType) if k.is_node_scope() => true,
                    _ => {
                        return Err(IrError::BadAccess {
                            access: format!("{}{}", op.result.name, op.result.access.suffix()),
                            ctx: "accumulate_sum target".into(),
                        })
                    }
                };
                // Targets may be written by several statements; the first
                // sight (or a pre-declared local) fixes the shape. Weight
                // targets accumulate a whole flat slice per type.
                if let Some(existing) = decls.get(&op.result.name) {
                    if !accum_targets.contains_key(&op.result.name) {
                        return Err(IrError::DoubleDef(op.result.name.clone()));
                    }
                    let slice = existing.slice_rows * existing.cols;
                    let ok = if weight_target {
                        existing.role.is_weight() && slice == w
                    } else {
                        matches!(existing.role, Role::Node { .. }) && existing.cols == w
                    };
                    if !ok {
                        return Err(IrError::BadShape {
                            at: op.result.name.clone(),
                            msg: "accumulation target shape mismatch".into(),
                        });
                    }
                    return Ok(());
                }
                if weight_target {
                    // Per-type accumulators need a pre-declared type count.
                    return Err(IrError::BadOp {
                        op: "accumulate_sum".into(),
                        msg: format!(
                            "weight-targeted accumulator {} must be declared as a local",
                            op.result.name
                        ),
                    });
                }
                accum_targets.insert(op.result.name.clone(), ());
                decls.insert(
                    op.result.name.clone(),
                    TensorDecl {
                        name: op.result.name.clone(),
                        role: Role::node(),
                        slice_rows: 1,
                        cols: w,
                        kind: DeclKind::Local,
                    },
                );
                return Ok(());
            }
            OpKind::Reshape { slice_rows, cols } => {
                if op.args.len() != 1 || !arg_shapes[0].0.is_weight() {
                    return Err(bad("reshape applies to a weight tensor"));
                }
                let (role, sr, c) = arg_shapes[0];
                if sr * c != slice_rows * cols {
                    return Err(IrError::BadShape {
                        at: op.result.name.clone(),
                        msg: "reshape must preserve slice size".into(),
                    });
                }
                (role, *slice_rows, *cols)
            }
            OpKind::Concat => {
                if op.args.len() < 2 {
                    return Err(bad("takes two or more operands"));
                }
                let total = (0..op.args.len()).map(width).sum();
                self.rowwise_result(op, ctx, total)?
            }
            OpKind::SliceCols { from, to } => {
                if op.args.len() != 1 || *from >= *to || *to > width(0) {
                    return Err(bad("slice bounds out of range"));
                }
                self.rowwise_result(op, ctx, to - from)?
            }
            OpKind::WeightWeightProduct(kind) => {
                if ctx.is_some() {
                    return Err(bad("weight-weight products live at top level"));
                }
                if op.args.len() != 2 {
                    return Err(bad("takes (a, b)"));
                }
                let (ra, sa, ca) = arg_shapes[0];
                let (rb, sb, cb) = arg_shapes[1];
                if !ra.is_weight() || !rb.is_weight() {
                    return Err(bad("operands must be weights"));
                }
                if ra.weight_types() != rb.weight_types() && !matches!(rb, Role::WeightSingle) {
                    return Err(IrError::BadShape {
                        at: op.result.name.clone(),
                        msg: "operand type counts differ".into(),
                    });
                }
                let (sr, c) = match kind {
                    WwKind::MatVec => {
                        if sb != 1 || cb != ca {
                            return Err(bad("mat_vec wants (s x c) and (1 x c)"));
                        }
                        (1, sa)
                    }
                    WwKind::VecMat => {
                        if sb != 1 || cb != sa {
                            return Err(bad("vec_mat wants (s x c) and (1 x s)"));
                        }
                        (1, ca)
                    }
                    WwKind::VecOuter => {
                        if sa != 1 || sb != 1 {
                            return Err(bad("vec_outer wants two vectors"));
                        }
                        (ca, cb)
                    }
                };
                (ra, sr, c)
            }
            OpKind::RowwiseMatVec {
                rows,
                cols,
                transpose,
            } => {
                if op.args.len() != 2 {
                    return Err(bad("takes (flat matrix, vector)"));
                }
                if width(0) != rows * cols {
                    return Err(bad("flat operand width must be rows*cols"));
                }
                let (want, out) = if *transpose { (*rows, *cols) } else { (*cols, *rows) };
                if width(1) != want {
                    return Err(bad("vector width mismatch"));
                }
                self.rowwise_result(op, ctx, out)?
            }
        };

        if decls.contains_key(&op.result.name) {
            return Err(IrError::DoubleDef(op.result.name.clone()));
        }
        decls.insert(
            op.result.name.clone(),
            TensorDecl {
                name: op.result.name.clone(),
                role: res_role,
                slice_rows: res_slice_rows,
                cols: res_cols,
                kind: DeclKind::Local,
            },
        );
        Ok(())
    }

    fn rowwise_result(
        &self,
        op: &OpCall,
        ctx: Option<ScopeKind>,
        cols: usize,
    ) -> Result<(Role, usize, usize), IrError> {
        let role = match (ctx, op.result.access) {
            (Some(ScopeKind::Edges), Access::Edge)
            | (Some(ScopeKind::IncomingEdges | ScopeKind::OutgoingEdges), Access::Edge) => {
                Role::Edge
            }
            (Some(k), Access::Node) if k.is_node_scope() => Role::node(),
            _ => {
                return Err(IrError::BadAccess {
                    access: format!("{}{}", op.result.name, op.result.access.suffix()),
                    ctx: ctx.map_or("top level".into(), |k| k.label().to_string()),
                })
            }
        };
        Ok((role, 1, cols))
    }

    /// Deterministic plain-text form: one statement per line, variables
    /// renamed `v0, v1, ...` in first-appearance order, original names
    /// kept as trailing comments.
    pub fn to_text(&self) -> String {
        let mut names: BTreeMap<String, usize> = BTreeMap::new();
        let intern = |n: &mut BTreeMap<String, usize>, s: &str| {
            if !n.contains_key(s) {
                let id = n.len();
                n.insert(s.to_string(), id);
            }
        };
        for d in self.inputs.iter().chain(&self.locals) {
            intern(&mut names, &d.name);
        }
        self.visit_ops(|_, _, op| {
            for a in &op.args {
                intern(&mut names, &a.name);
            }
            intern(&mut names, &op.result.name);
        });
        let v = |s: &str| format!("v{}", names[s]);

        let mut out = String::new();
        let _ = writeln!(out, "program {}", self.name);
        for d in &self.inputs {
            let kw = match d.kind {
                DeclKind::Weight => "weight",
                _ => "input",
            };
            let _ = writeln!(
                out,
                "{kw} {} {}{{{}x{}}} ; {}",
                v(&d.name),
                d.role.label(),
                d.slice_rows,
                d.cols,
                d.name
            );
        }
        for d in &self.locals {
            let _ = writeln!(
                out,
                "local {} {}{{{}x{}}} ; {}",
                v(&d.name),
                d.role.label(),
                d.slice_rows,
                d.cols,
                d.name
            );
        }
        fn emit_stmts(
            out: &mut String,
            stmts: &[Stmt],
            indent: usize,
            v: &dyn Fn(&str) -> String,
        ) {
            for s in stmts {
                match s {
                    Stmt::Scope(sc) => {
                        let _ = writeln!(out, "{:indent$}scope {} {{", "", sc.kind.label());
                        emit_stmts(out, &sc.body, indent + 2, v);
                        let _ = writeln!(out, "{:indent$}}}", "");
                    }
                    Stmt::Op(op) => {
                        let args = op
                            .args
                            .iter()
                            .map(|a| format!("{}{}", v(&a.name), a.access.suffix()))
                            .collect::<Vec<_>>()
                            .join(", ");
                        let line = if op.op == OpKind::AccumulateSum {
                            format!(
                                "{}{} += sum({})",
                                v(&op.result.name),
                                op.result.access.suffix(),
                                args
                            )
                        } else {
                            format!(
                                "{}{} = {}({})",
                                v(&op.result.name),
                                op.result.access.suffix(),
                                op.op.label(),
                                args
                            )
                        };
                        let _ = writeln!(out, "{:indent$}{line} ; {}", "", op.result.name);
                    }
                }
            }
        }
        emit_stmts(&mut out, &self.stmts, 0, &v);
        for o in &self.outputs {
            let _ = writeln!(out, "output {} ; {}", v(o), o);
        }
        out
    }
}

/// Convenience constructors used by the model zoo and tests.
pub struct ProgramBuilder {
    program: Program,
}

impl ProgramBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            program: Program::new(name),
        }
    }

    pub fn input(&mut self, decl: TensorDecl) -> &mut Self {
        self.program.inputs.push(decl);
        self
    }

    pub fn scope(&mut self, kind: ScopeKind, body: Vec<Stmt>) -> &mut Self {
        self.program.stmts.push(Stmt::Scope(Scope { kind, body }));
        self
    }

    pub fn op(&mut self, op: OpCall) -> &mut Self {
        self.program.stmts.push(Stmt::Op(op));
        self
    }

    pub fn output(&mut self, name: impl Into<String>) -> &mut Self {
        self.program.outputs.push(name.into());
        self
    }

    pub fn finish(self) -> Program {
        self.program
            .validate()
            .expect("builder produced an invalid program");
        self.program
    }
}

/// Shorthand for building an `OpCall`.
pub fn call(op: OpKind, result: VarRef, args: Vec<VarRef>) -> OpCall {
    OpCall {
        op,
        result,
        args,
        origin: None,
    }
}

pub fn vr(name: &str, access: Access) -> VarRef {
    VarRef::new(name, access)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_edge_program() -> Program {
        let mut b = ProgramBuilder::new("tiny");
        b.input(TensorDecl::node("h", 4));
        b.input(TensorDecl::weight_etype("W", 2, 4, 3));
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
                    OpKind::AccumulateSum,
                    vr("agg", Access::Dst),
                    vec![vr("msg", Access::Edge)],
                )),
            ],
        );
        b.output("agg");
        b.finish()
    }

    #[test]
    fn validates_and_infers_shapes() {
        let p = tiny_edge_program();
        let decls = p.infer_decls().unwrap();
        assert_eq!(decls["msg"].cols, 3);
        assert_eq!(decls["msg"].role, Role::Edge);
        assert_eq!(decls["agg"].role, Role::node());
        assert_eq!(p.num_ops(), 2);
    }

    #[test]
    fn rejects_use_before_def() {
        let mut b = ProgramBuilder::new("bad");
        b.input(TensorDecl::node("h", 4));
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::Unary(UnaryKind::Exp),
                vr("y", Access::Edge),
                vec![vr("missing", Access::Edge)],
            ))],
        );
        let p = b.program;
        assert!(matches!(p.validate(), Err(IrError::UseBeforeDef(_))));
    }

    #[test]
    fn rejects_neighbor_scope_at_top_level() {
        let mut p = Program::new("bad");
        p.stmts.push(Stmt::Scope(Scope {
            kind: ScopeKind::IncomingEdges,
            body: vec![],
        }));
        assert!(matches!(p.validate(), Err(IrError::BadOp { .. })));
    }

    #[test]
    fn rejects_dot_width_mismatch() {
        let mut b = ProgramBuilder::new("bad");
        b.input(TensorDecl::node("h", 4));
        b.input(TensorDecl::weight_etype("w", 2, 1, 3));
        b.scope(
            ScopeKind::Edges,
            vec![Stmt::Op(call(
                OpKind::DotProd,
                vr("d", Access::Edge),
                vec![vr("h", Access::Src), vr("w", Access::EType)],
            ))],
        );
        assert!(matches!(b.program.validate(), Err(IrError::BadShape { .. })));
    }

    #[test]
    fn text_form_is_stable() {
        let p = tiny_edge_program();
        let a = p.to_text();
        let b = p.to_text();
        assert_eq!(a, b);
        assert!(a.contains("v2@edge = typed_linear(v0@src, v1@etype) ; msg"));
        assert!(a.contains("v3@dst += sum(v2@edge) ; agg"));
    }
}
