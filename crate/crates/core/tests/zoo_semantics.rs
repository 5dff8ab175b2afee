//! Hand-checkable semantic fixtures for the model zoo and the
//! interpreter: identity-weight convolution, uniform attention, the
//! softmax Jacobian property, gradient pruning, and the non-canonical
//! scope fallback path.

use std::collections::BTreeSet;

use rgnnc_core::graph::HeteroGraph;
use rgnnc_core::interp::{
    analytic_grads, finite_diff_grad, run_forward, run_plan, Environment, ExecError,
};
use rgnnc_core::ir::autodiff::derive_backward;
use rgnnc_core::ir::passes::prune_unused_gradients;
use rgnnc_core::ir::{
    call, vr, Access, DimsConfig, OpKind, ProgramBuilder, Scope, ScopeKind, Stmt, TensorDecl,
    UnaryKind,
};
use rgnnc_core::lower::{lower, LowerOptions};
use rgnnc_core::tensor::{TensorValue, ValueRole};
use rgnnc_core::zoo::{build_model, build_rgcn, dims_for, memreport, standard_env, ModelKind, ModelOptions};

fn g7() -> HeteroGraph {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/g7.tsv"
    ))
    .unwrap();
    HeteroGraph::parse_tsv(&text).unwrap().sort_edges_by_type()
}

fn identity_weight(types: usize, d: usize) -> TensorValue {
    let mut w = TensorValue::zeros(
        types * d,
        d,
        ValueRole::Weight {
            types,
            slice_rows: d,
        },
    );
    for t in 0..types {
        for i in 0..d {
            w.set(t * d + i, i, 1.0);
        }
    }
    w
}

/// Identity weights and unit normalization reduce the convolution to
/// plain neighborhood sums plus the node's own feature.
#[test]
fn rgcn_identity_weights_sums_neighbors() {
    let g = g7();
    let d = 4;
    let p = build_rgcn(&dims_for(&g, d, d), &ModelOptions::default());
    let mut env = Environment::with_preprocessing(g.clone());
    let mut h = TensorValue::zeros(5, d, ValueRole::Node);
    for v in 0..5 {
        for c in 0..d {
            h.set(v, c, (v * 10 + c) as f64);
        }
    }
    env.bind("h", h.clone());
    env.bind("W", identity_weight(2, d));
    let mut w0 = identity_weight(1, d);
    w0 = TensorValue::from_flat(
        d,
        d,
        w0.data().to_vec(),
        ValueRole::Weight {
            types: 1,
            slice_rows: d,
        },
    );
    env.bind("W0", w0);
    env.bind(
        "norm",
        TensorValue::from_flat(7, 1, vec![1.0; 7], ValueRole::Edge),
    );
    let out = run_forward(&p, &env).unwrap();
    let o = out.get("out").unwrap();
    // paper node q (id 4): writes from authors 0, 1, 2, a cite from paper
    // 3, and its own feature
    for c in 0..d {
        let want = h.at(4, c) + h.at(0, c) + h.at(1, c) + h.at(2, c) + h.at(3, c);
        assert!((o.at(4, c) - want).abs() < 1e-12);
    }
    // node 0 has no incoming edges: self term only
    for c in 0..d {
        assert!((o.at(0, c) - h.at(0, c)).abs() < 1e-12);
    }
}

/// Equal logits at every edge make attention uniform: one over the
/// destination's in-degree.
#[test]
fn rgat_uniform_attention_is_inverse_in_degree() {
    let g = g7();
    let d = 4;
    let p = build_model(ModelKind::Rgat, &dims_for(&g, d, d), &ModelOptions::default());
    let mut env = Environment::with_preprocessing(g.clone());
    let ones = |rows: usize, cols: usize, role| {
        TensorValue::from_flat(rows, cols, vec![1.0; rows * cols], role)
    };
    env.bind("h", ones(5, d, ValueRole::Node));
    env.bind(
        "W",
        ones(
            2 * d,
            d,
            ValueRole::Weight {
                types: 2,
                slice_rows: d,
            },
        ),
    );
    env.bind(
        "ws",
        ones(
            2,
            d,
            ValueRole::Weight {
                types: 2,
                slice_rows: 1,
            },
        ),
    );
    env.bind(
        "wt",
        ones(
            2,
            d,
            ValueRole::Weight {
                types: 2,
                slice_rows: 1,
            },
        ),
    );
    let out = run_forward(&p, &env).unwrap();
    let attn = out.get("attn").unwrap();
    let mut in_deg = vec![0usize; 5];
    for e in 0..7 {
        in_deg[g.dst(e)] += 1;
    }
    for e in 0..7 {
        let want = 1.0 / in_deg[g.dst(e)] as f64;
        assert!((attn.at(e, 0) - want).abs() < 1e-12);
    }
}

/// Softmax Jacobian property: with a uniform upstream gradient the
/// gradient of the logits sums to zero within each destination.
#[test]
fn edge_softmax_backward_rows_sum_to_zero() {
    let g = g7();
    let mut b = ProgramBuilder::new("softmax_only");
    b.input(TensorDecl::edge("logit", 1));
    b.scope(
        ScopeKind::Edges,
        vec![Stmt::Op(call(
            OpKind::Unary(UnaryKind::Exp),
            vr("atte", Access::Edge),
            vec![vr("logit", Access::Edge)],
        ))],
    );
    b.scope(
        ScopeKind::DstNodes,
        vec![Stmt::Scope(Scope {
            kind: ScopeKind::IncomingEdges,
            body: vec![Stmt::Op(call(
                OpKind::AccumulateSum,
                vr("attsum", Access::Node),
                vec![vr("atte", Access::Edge)],
            ))],
        })],
    );
    b.scope(
        ScopeKind::Edges,
        vec![Stmt::Op(call(
            OpKind::Binary(rgnnc_core::ir::BinaryKind::Div),
            vr("attn", Access::Edge),
            vec![vr("atte", Access::Edge), vr("attsum", Access::Dst)],
        ))],
    );
    b.output("attn");
    let p = b.finish();

    let mut env = Environment::with_preprocessing(g.clone());
    let logits: Vec<f64> = (0..7).map(|e| (e as f64) * 0.3 - 1.0).collect();
    env.bind(
        "logit",
        TensorValue::from_flat(7, 1, logits, ValueRole::Edge),
    );
    // loss = sum of attn = number of destinations with incoming edges;
    // its gradient through the softmax must vanish per destination
    let grads = analytic_grads(&p, &env).unwrap();
    let glogit = &grads["logit"];
    let mut per_dst = vec![0.0f64; g.num_nodes()];
    for e in 0..7 {
        per_dst[g.dst(e)] += glogit.at(e, 0);
    }
    for (v, s) in per_dst.iter().enumerate() {
        assert!(s.abs() < 1e-12, "node {v}: {s}");
    }
}

/// Pruning to weight gradients removes every feature-gradient statement.
#[test]
fn prune_drops_feature_gradient_statements() {
    let g = g7();
    let dims = dims_for(&g, 3, 4);
    let p = build_model(ModelKind::Rgcn, &dims, &ModelOptions::default());
    let bwd = derive_backward(&p).unwrap();
    let all_outputs: BTreeSet<String> = bwd.outputs.iter().cloned().collect();
    let unchanged = prune_unused_gradients(&bwd, &all_outputs);
    assert_eq!(unchanged.num_ops(), bwd.num_ops());

    let wanted: BTreeSet<String> = ["g__W".to_string(), "g__W0".to_string()].into();
    let pruned = prune_unused_gradients(&bwd, &wanted);
    assert!(pruned.num_ops() < bwd.num_ops());
    assert_eq!(pruned.outputs, vec!["g__W", "g__W0"]);
    // nothing in the pruned program mentions the feature gradient
    let mut mentions_gh = false;
    pruned.visit_ops(|_, _, op| {
        if op.result.name.contains("__h") || op.result.name == "g__h" {
            mentions_gh = true;
        }
    });
    assert!(!mentions_gh, "feature-gradient statements must be gone");
    // and the surviving gradients are identical
    let env = standard_env(&p, &g, 5);
    let fwd = run_forward(&p, &env).unwrap();
    let mut benv = fwd.clone();
    let mut seed = fwd.get("out").unwrap().clone();
    seed.data_mut().fill(1.0);
    benv.bind("seed__out", seed);
    let full = run_forward(&bwd, &benv).unwrap();
    let cut = run_forward(&pruned, &benv).unwrap();
    for w in &wanted {
        assert_eq!(full.get(w).unwrap(), cut.get(w).unwrap());
    }
}

/// A node scope mixing nodewise work with a neighbor nest cannot be
/// canonicalized; its nested ops fall back but still execute correctly.
#[test]
fn non_canonical_scope_falls_back_and_still_runs() {
    let g = g7();
    let mut b = ProgramBuilder::new("mixed");
    b.input(TensorDecl::node("x", 3));
    b.input(TensorDecl::weight_etype("W", 2, 3, 3));
    b.scope(
        ScopeKind::DstNodes,
        vec![
            Stmt::Op(call(
                OpKind::Unary(UnaryKind::Scale(2.0)),
                vr("x2", Access::Node),
                vec![vr("x", Access::Node)],
            )),
            Stmt::Scope(Scope {
                kind: ScopeKind::IncomingEdges,
                body: vec![
                    Stmt::Op(call(
                        OpKind::TypedLinear {
                            transpose_weight: false,
                        },
                        vr("m", Access::Edge),
                        vec![vr("x", Access::Src), vr("W", Access::EType)],
                    )),
                    Stmt::Op(call(
                        OpKind::AccumulateSum,
                        vr("acc", Access::Node),
                        vec![vr("m", Access::Edge)],
                    )),
                ],
            }),
        ],
    );
    b.scope(
        ScopeKind::DstNodes,
        vec![Stmt::Op(call(
            OpKind::Binary(rgnnc_core::ir::BinaryKind::Add),
            vr("out", Access::Node),
            vec![vr("acc", Access::Node), vr("x2", Access::Node)],
        ))],
    );
    b.output("out");
    let p = b.finish();
    let plan = lower(&p, LowerOptions::default());
    assert!(plan
        .fallback
        .iter()
        .any(|f| f.reason == "non-canonical scope"));
    // the GEMM-eligible op inside the nest is among the fallbacks
    assert!(plan
        .fallback
        .iter()
        .any(|f| matches!(f.op.op, OpKind::TypedLinear { .. })));
    let env = standard_env(&p, &g, 2);
    let want = run_forward(&p, &env).unwrap();
    let got = run_plan(&plan, &env).unwrap();
    assert_eq!(
        want.get("out").unwrap(),
        got.get("out").unwrap(),
        "fallback execution matches"
    );
}

/// Execution errors carry the offending variable's name.
#[test]
fn execution_errors_name_the_variable() {
    let g = g7();
    let dims = dims_for(&g, 3, 3);
    let p = build_model(ModelKind::Rgcn, &dims, &ModelOptions::default());
    let mut env = standard_env(&p, &g, 0);
    env.bindings.remove("W");
    assert_eq!(
        run_forward(&p, &env).unwrap_err(),
        ExecError::MissingBinding("W".into())
    );

    let mut env = standard_env(&p, &g, 0);
    env.bind("h", TensorValue::zeros(3, 3, ValueRole::Node)); // 5 nodes expected
    match run_forward(&p, &env).unwrap_err() {
        ExecError::Shape { name, .. } => assert_eq!(name, "h"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

/// The full differentiable subset: outer products, concatenation, and
/// weight reshapes all pass finite differences through their adjoints.
#[test]
fn outer_product_concat_and_reshape_gradients() {
    let g = g7();
    let mut b = ProgramBuilder::new("wide");
    b.input(TensorDecl::node("h", 3));
    b.input(TensorDecl::weight_etype("Wflat", 2, 6, 8));
    b.scope(
        ScopeKind::Edges,
        vec![
            // per-edge outer product of endpoint features (3 x 3 flat)
            Stmt::Op(call(
                OpKind::OuterProd,
                vr("op", Access::Edge),
                vec![vr("h", Access::Src), vr("h", Access::Dst)],
            )),
            // concatenated with the source feature: 9 + 3 = 12 columns
            Stmt::Op(call(
                OpKind::Concat,
                vr("cat", Access::Edge),
                vec![vr("op", Access::Edge), vr("h", Access::Src)],
            )),
        ],
    );
    // reshape the (6 x 8) weight slices to (12 x 4) so they accept the
    // concatenated rows
    b.op(call(
        OpKind::Reshape {
            slice_rows: 12,
            cols: 4,
        },
        vr("Wr", Access::Plain),
        vec![vr("Wflat", Access::Plain)],
    ));
    b.scope(
        ScopeKind::Edges,
        vec![
            Stmt::Op(call(
                OpKind::TypedLinear {
                    transpose_weight: false,
                },
                vr("proj", Access::Edge),
                vec![vr("cat", Access::Edge), vr("Wr", Access::EType)],
            )),
            Stmt::Op(call(
                OpKind::AccumulateSum,
                vr("agg", Access::Dst),
                vec![vr("proj", Access::Edge)],
            )),
        ],
    );
    b.output("agg");
    let p = b.finish();
    let env = standard_env(&p, &g, 13);

    // analytic vs central differences for both the weight and the feature
    use rgnnc_core::interp::grad_check_param;
    let werr = grad_check_param(&p, &env, "Wflat", 1e-6).unwrap();
    assert!(werr <= 1e-4, "Wflat: {werr:.3e}");
    let herr = grad_check_param(&p, &env, "h", 1e-6).unwrap();
    assert!(herr <= 1e-4, "h: {herr:.3e}");

    // and the lowered plan still agrees (outer product on the GEMM path)
    let plan = lower(&p, LowerOptions::default());
    assert!(plan.coverage_counts().iter().all(|&c| c == 1));
    let want = run_forward(&p, &env).unwrap();
    let got = run_plan(&plan, &env).unwrap();
    let err = got
        .get("agg")
        .unwrap()
        .max_rel_err(want.get("agg").unwrap());
    assert!(err <= 1e-9);
}

#[test]
fn finite_differences_reject_zero_step() {
    let g = g7();
    let dims = dims_for(&g, 3, 3);
    let p = build_model(ModelKind::Rgcn, &dims, &ModelOptions::default());
    let env = standard_env(&p, &g, 1);
    assert_eq!(
        finite_diff_grad(&p, &env, "W", 0.0).unwrap_err(),
        ExecError::ZeroStep
    );
}

/// A program without edgewise tensors has nothing to compact.
#[test]
fn memreport_without_edgewise_tensors_is_unchanged() {
    let g = g7();
    let mut b = ProgramBuilder::new("nodes_only");
    b.input(TensorDecl::node("x", 8));
    b.input(TensorDecl::weight_single("M", 8, 8));
    b.scope(
        ScopeKind::DstNodes,
        vec![Stmt::Op(call(
            OpKind::TypedLinear {
                transpose_weight: false,
            },
            vr("y", Access::Node),
            vec![vr("x", Access::Node), vr("M", Access::SingleType)],
        ))],
    );
    b.output("y");
    let p = b.finish();
    let ci = g.build_compact_index();
    let report = memreport(&p, &g, &ci);
    assert_eq!(report.total_bytes_vanilla, report.total_bytes_compact);
    assert_eq!(report.compactable_bytes_vanilla, 0);
}

/// RGCN with configurable activation applies it to the combined output.
#[test]
fn activation_is_configurable() {
    let g = g7();
    let dims = dims_for(&g, 3, 3);
    let base = build_model(
        ModelKind::Rgcn,
        &dims,
        &ModelOptions {
            leaky_slope: 0.2,
            activation: rgnnc_core::zoo::Activation::Identity,
        },
    );
    let act = build_model(
        ModelKind::Rgcn,
        &dims,
        &ModelOptions {
            leaky_slope: 0.3,
            activation: rgnnc_core::zoo::Activation::LeakyRelu,
        },
    );
    let env = standard_env(&base, &g, 4);
    let a = run_forward(&base, &env).unwrap();
    let b = run_forward(&act, &env).unwrap();
    let (ta, tb) = (a.get("out").unwrap(), b.get("out").unwrap());
    for i in 0..ta.data().len() {
        let x = ta.data()[i];
        let want = if x > 0.0 { x } else { 0.3 * x };
        assert!((tb.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn dims_config_rejects_zero() {
    let result = std::panic::catch_unwind(|| DimsConfig::new(0, 4, 1, 1));
    assert!(result.is_err());
}

/// Kernels for less common instances (forward outer products) still
/// conform to the dialect grammar.
#[test]
fn emitted_outer_product_kernel_parses() {
    use rgnnc_core::emit::{emit_plan, grammar::parse_kernel_text};
    let mut b = ProgramBuilder::new("outer");
    b.input(TensorDecl::node("h", 3));
    b.scope(
        ScopeKind::Edges,
        vec![Stmt::Op(call(
            OpKind::OuterProd,
            vr("op", Access::Edge),
            vec![vr("h", Access::Src), vr("h", Access::Dst)],
        ))],
    );
    b.output("op");
    let plan = lower(&b.finish(), LowerOptions::default());
    assert_eq!(plan.gemms.len(), 1);
    let art = emit_plan(&plan, None);
    for (file, text) in &art.kernels {
        parse_kernel_text(text).unwrap_or_else(|e| panic!("{file}: {e}"));
    }
}
