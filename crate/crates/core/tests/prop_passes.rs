//! Property tests: pass soundness over generated programs and graphs,
//! structural plan invariants, and byte-level determinism.

use std::collections::BTreeSet;

use proptest::prelude::*;

use rgnnc_core::graph::{DegreeModel, HeteroGraph, SynthSpec};
use rgnnc_core::interp::{run_forward, run_plan, Environment};
use rgnnc_core::ir::passes::{
    canonicalize_loops, fuse_loops, prune_unused_gradients, reorder_linear_ops,
};
use rgnnc_core::ir::{
    call, vr, Access, BinaryKind, OpKind, Program, ProgramBuilder, Scope, ScopeKind, Stmt,
    TensorDecl, UnaryKind,
};
use rgnnc_core::kernel::{Adjacency, GemmSchedule, Layout};
use rgnnc_core::lower::{lower, LowerOptions};

const D_IN: usize = 3;
const D_OUT: usize = 4;

/// A generated edge-scope statement, chosen against the live variables.
#[derive(Debug, Clone)]
enum GenOp {
    TypedLinearSrc,
    TypedLinearDst,
    TypedLinearEdge(usize),
    DotWithVec(usize),
    DotPair(usize, usize),
    Unary(u8, usize),
    Binary(u8, usize, usize),
    ScaleOfScalar(usize),
}

fn gen_ops() -> impl Strategy<Value = Vec<GenOp>> {
    let one = prop_oneof![
        Just(GenOp::TypedLinearSrc),
        Just(GenOp::TypedLinearDst),
        (0usize..8).prop_map(GenOp::TypedLinearEdge),
        (0usize..8).prop_map(GenOp::DotWithVec),
        (0usize..8, 0usize..8).prop_map(|(a, b)| GenOp::DotPair(a, b)),
        (0u8..3, 0usize..8).prop_map(|(k, a)| GenOp::Unary(k, a)),
        (0u8..3, 0usize..8, 0usize..8).prop_map(|(k, a, b)| GenOp::Binary(k, a, b)),
        (0usize..8).prop_map(GenOp::ScaleOfScalar),
    ];
    prop::collection::vec(one, 2..9)
}

/// Assemble a valid program from the raw choices: indices select among
/// live edge variables of the required width, wrapping around.
fn assemble(ops: &[GenOp], split_loops: bool, aggregate: bool) -> Program {
    let mut b = ProgramBuilder::new("generated");
    b.input(TensorDecl::node("h", D_IN));
    b.input(TensorDecl::weight_etype("W", 2, D_IN, D_OUT));
    b.input(TensorDecl::weight_etype("wv", 2, 1, D_OUT));
    b.input(TensorDecl::weight_etype("W2", 2, D_OUT, D_OUT));
    b.input(TensorDecl::edge("escalar", 1));

    // live edge vars by (name, width)
    let mut vars: Vec<(String, usize)> = vec![("escalar".into(), 1)];
    let mut stmts: Vec<Stmt> = Vec::new();
    let mut k = 0usize;
    for op in ops {
        let name = format!("t{k}");
        k += 1;
        let pick = |idx: usize, width: Option<usize>| -> Option<(String, usize)> {
            let pool: Vec<&(String, usize)> = vars
                .iter()
                .filter(|(_, w)| width.map_or(true, |want| *w == want))
                .collect();
            if pool.is_empty() {
                None
            } else {
                Some(pool[idx % pool.len()].clone())
            }
        };
        let stmt = match op {
            GenOp::TypedLinearSrc => Some((
                call(
                    OpKind::TypedLinear {
                        transpose_weight: false,
                    },
                    vr(&name, Access::Edge),
                    vec![vr("h", Access::Src), vr("W", Access::EType)],
                ),
                D_OUT,
            )),
            GenOp::TypedLinearDst => Some((
                call(
                    OpKind::TypedLinear {
                        transpose_weight: false,
                    },
                    vr(&name, Access::Edge),
                    vec![vr("h", Access::Dst), vr("W", Access::EType)],
                ),
                D_OUT,
            )),
            GenOp::TypedLinearEdge(i) => pick(*i, Some(D_OUT)).map(|(a, _)| {
                (
                    call(
                        OpKind::TypedLinear {
                            transpose_weight: false,
                        },
                        vr(&name, Access::Edge),
                        vec![vr(&a, Access::Edge), vr("W2", Access::EType)],
                    ),
                    D_OUT,
                )
            }),
            GenOp::DotWithVec(i) => pick(*i, Some(D_OUT)).map(|(a, _)| {
                (
                    call(
                        OpKind::DotProd,
                        vr(&name, Access::Edge),
                        vec![vr(&a, Access::Edge), vr("wv", Access::EType)],
                    ),
                    1,
                )
            }),
            GenOp::DotPair(i, j) => match (pick(*i, Some(D_OUT)), pick(*j, Some(D_OUT))) {
                (Some((a, _)), Some((c, _))) => Some((
                    call(
                        OpKind::DotProd,
                        vr(&name, Access::Edge),
                        vec![vr(&a, Access::Edge), vr(&c, Access::Edge)],
                    ),
                    1,
                )),
                _ => None,
            },
            GenOp::Unary(kind, i) => pick(*i, None).map(|(a, w)| {
                let u = match kind % 3 {
                    0 => UnaryKind::Identity,
                    1 => UnaryKind::LeakyRelu { slope: 0.2 },
                    _ => UnaryKind::Scale(0.5),
                };
                (
                    call(OpKind::Unary(u), vr(&name, Access::Edge), vec![vr(&a, Access::Edge)]),
                    w,
                )
            }),
            GenOp::Binary(kind, i, j) => match (pick(*i, None), pick(*j, None)) {
                (Some((a, wa)), Some((c, wc))) => {
                    // same width, or scalar on the right (the only widths
                    // in play are D_OUT and 1)
                    let picked = if wa == wc || wc == 1 {
                        Some((a, c, wa))
                    } else if wa == 1 {
                        Some((c, a, wc))
                    } else {
                        None
                    };
                    picked.map(|(a, c, w)| {
                        let bk = match kind % 3 {
                            0 => BinaryKind::Add,
                            1 => BinaryKind::Sub,
                            _ => BinaryKind::Mul,
                        };
                        (
                            call(
                                OpKind::Binary(bk),
                                vr(&name, Access::Edge),
                                vec![vr(&a, Access::Edge), vr(&c, Access::Edge)],
                            ),
                            w,
                        )
                    })
                }
                _ => None,
            },
            GenOp::ScaleOfScalar(i) => pick(*i, Some(1)).map(|(a, _)| {
                (
                    call(
                        OpKind::Unary(UnaryKind::Scale(-0.25)),
                        vr(&name, Access::Edge),
                        vec![vr(&a, Access::Edge)],
                    ),
                    1,
                )
            }),
        };
        if let Some((opcall, w)) = stmt {
            stmts.push(Stmt::Op(opcall));
            vars.push((name, w));
        }
    }
    if stmts.is_empty() {
        stmts.push(Stmt::Op(call(
            OpKind::Unary(UnaryKind::Identity),
            vr("t_last", Access::Edge),
            vec![vr("escalar", Access::Edge)],
        )));
        vars.push(("t_last".into(), 1));
    }

    // Split the statements over one or two edge loops.
    if split_loops && stmts.len() > 1 {
        let mid = stmts.len() / 2;
        let tail = stmts.split_off(mid);
        b.scope(ScopeKind::Edges, stmts);
        b.scope(ScopeKind::Edges, tail);
    } else {
        b.scope(ScopeKind::Edges, stmts);
    }

    let (last, _) = vars.last().unwrap().clone();
    if aggregate {
        // node/incoming nest so canonicalization has work to do
        b.scope(
            ScopeKind::DstNodes,
            vec![Stmt::Scope(Scope {
                kind: ScopeKind::IncomingEdges,
                body: vec![Stmt::Op(call(
                    OpKind::AccumulateSum,
                    vr("acc", Access::Node),
                    vec![vr(&last, Access::Edge)],
                ))],
            })],
        );
        b.output("acc");
    } else {
        b.output(&last);
    }
    b.finish()
}

fn prop_graph(seed: u64) -> HeteroGraph {
    HeteroGraph::generate_synthetic(
        &SynthSpec {
            node_counts: vec![9, 7],
            edge_type_count: 2,
            edge_count: 40,
            allow_duplicates: true,
            degree: DegreeModel::Uniform,
        },
        seed,
    )
    .unwrap()
    .sort_edges_by_type()
}

fn prop_env(p: &Program, g: &HeteroGraph, seed: u64) -> Environment {
    rgnnc_core::zoo::standard_env(p, g, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// interpreter(P(p)) == interpreter(p) for every pass, and the
    /// lowered plan agrees with the interpreter, on generated programs.
    #[test]
    fn pass_soundness_on_generated_programs(
        ops in gen_ops(),
        split in any::<bool>(),
        aggregate in any::<bool>(),
        seed in 0u64..64,
    ) {
        let p = assemble(&ops, split, aggregate);
        let g = prop_graph(seed);
        let env = prop_env(&p, &g, seed ^ 0xfeed);
        let base = run_forward(&p, &env).unwrap();
        let out = p.outputs[0].clone();
        let base_out = base.get(&out).unwrap();

        let canonical = canonicalize_loops(&p);
        let c = run_forward(&canonical, &env).unwrap();
        prop_assert!(c.get(&out).unwrap().max_rel_err(base_out) <= 1e-9);

        let fused = fuse_loops(&canonical);
        let f = run_forward(&fused, &env).unwrap();
        prop_assert!(f.get(&out).unwrap().max_rel_err(base_out) <= 1e-9);

        let (reordered, _) = reorder_linear_ops(&p, env.stats.as_ref().unwrap());
        let r = run_forward(&reordered, &env).unwrap();
        prop_assert!(r.get(&out).unwrap().max_rel_err(base_out) <= 1e-9);

        let wanted: BTreeSet<String> = [out.clone()].into();
        let pruned = prune_unused_gradients(&canonical, &wanted);
        let pr = run_forward(&pruned, &env).unwrap();
        prop_assert!(pr.get(&out).unwrap().max_rel_err(base_out) <= 1e-9);

        for layout in [Layout::Vanilla, Layout::Compact] {
            for adjacency in [Adjacency::Coo, Adjacency::Csr] {
                let plan = lower(&p, LowerOptions { layout, adjacency, schedule: GemmSchedule::default() });
                let counts = plan.coverage_counts();
                prop_assert!(counts.iter().all(|&c| c == 1), "coverage {:?}", counts);
                let got = run_plan(&plan, &env).unwrap();
                prop_assert!(got.get(&out).unwrap().max_rel_err(base_out) <= 1e-9);
            }
        }
    }

    /// Schedule options never change results: tile width and coarsening
    /// alter emitted text only.
    #[test]
    fn schedules_do_not_change_semantics(
        ops in gen_ops(),
        seed in 0u64..32,
        tile in prop::sample::select(vec![4usize, 16, 32]),
        coarsen in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let p = assemble(&ops, false, true);
        let g = prop_graph(seed);
        let env = prop_env(&p, &g, seed);
        let base_plan = lower(&p, LowerOptions::default());
        let base = run_plan(&base_plan, &env).unwrap();
        let plan = lower(&p, LowerOptions {
            layout: Layout::Vanilla,
            adjacency: Adjacency::Coo,
            schedule: GemmSchedule { tile_width: tile, coarsening_factor: coarsen, register_limit_hint: Some(64) },
        });
        let got = run_plan(&plan, &env).unwrap();
        for o in &p.outputs {
            prop_assert_eq!(got.get(o).unwrap(), base.get(o).unwrap());
        }
    }

    /// Passes and serialization are byte-deterministic.
    #[test]
    fn passes_are_deterministic(ops in gen_ops(), split in any::<bool>()) {
        let p = assemble(&ops, split, true);
        let a = fuse_loops(&canonicalize_loops(&p)).to_text();
        let b = fuse_loops(&canonicalize_loops(&p)).to_text();
        prop_assert_eq!(a, b);
        let pa = lower(&p, LowerOptions::default()).to_text();
        let pb = lower(&p, LowerOptions::default()).to_text();
        prop_assert_eq!(pa, pb);
    }
}

/// Hoisting affects emitted text only; executing a traversal instance
/// with every statement forced innermost gives identical results.
#[test]
fn hoisting_is_semantically_inert() {
    use rgnnc_core::kernel::HoistLevel;
    let p = assemble(
        &[
            GenOp::TypedLinearSrc,
            GenOp::DotWithVec(0),
            GenOp::Unary(1, 1),
            GenOp::Binary(2, 1, 2),
        ],
        false,
        true,
    );
    let g = prop_graph(3);
    let env = prop_env(&p, &g, 3);
    let plan = lower(&p, LowerOptions::default());
    let base = run_plan(&plan, &env).unwrap();
    let mut unhoisted = plan.clone();
    for t in &mut unhoisted.traversals {
        for s in &mut t.stmts {
            s.hoist = HoistLevel::Feature;
        }
    }
    let got = run_plan(&unhoisted, &env).unwrap();
    for o in &p.outputs {
        assert_eq!(got.get(o).unwrap(), base.get(o).unwrap());
    }
}

/// Compact and vanilla materializations agree on every output.
#[test]
fn compact_invariance_on_zoo_models() {
    use rgnnc_core::zoo::{build_model, dims_for, ModelKind, ModelOptions};
    for seed in 0..24u64 {
        let g = prop_graph(seed);
        let dims = dims_for(&g, 5, 6);
        for model in ModelKind::all() {
            let p = build_model(model, &dims, &ModelOptions::default());
            let env = prop_env(&p, &g, seed);
            let vanilla = run_plan(&lower(&p, LowerOptions::default()), &env).unwrap();
            let compact = run_plan(
                &lower(
                    &p,
                    LowerOptions {
                        layout: Layout::Compact,
                        adjacency: Adjacency::Coo,
                        schedule: GemmSchedule::default(),
                    },
                ),
                &env,
            )
            .unwrap();
            let err = compact
                .get("out")
                .unwrap()
                .max_rel_err(vanilla.get("out").unwrap());
            assert!(err <= 1e-9, "seed {seed} {model:?}: {err:.3e}");
        }
    }
}

/// Access-scheme equivalence, exhaustively on small graphs: COO and CSR
/// resolve identical triples for every logical edge.
#[test]
fn access_scheme_equivalence_exhaustive() {
    use rgnnc_core::kernel::resolve_access;
    for seed in 0..64u64 {
        let g = prop_graph(seed);
        let csr = g.build_csr();
        let entry_of_edge = csr.entry_of_edge();
        for e in 0..g.num_edges() {
            let coo = resolve_access(&g, None, Adjacency::Coo, e).unwrap();
            let via = resolve_access(&g, Some(&csr), Adjacency::Csr, entry_of_edge[e]).unwrap();
            assert_eq!(coo, via);
        }
    }
}

/// Backward programs lower and execute through the same pipeline; their
/// plans mix scatter-GEMMs with traversals whose products feed later
/// GEMMs, exercising the dependency-ordered execution schedule.
#[test]
fn backward_plans_match_direct_execution() {
    use rgnnc_core::ir::autodiff::derive_backward;
    use rgnnc_core::zoo::{build_model, dims_for, ModelKind, ModelOptions};
    for seed in 0..6u64 {
        let g = prop_graph(seed);
        let dims = dims_for(&g, 3, 4);
        for model in ModelKind::all() {
            let p = build_model(model, &dims, &ModelOptions::default());
            let env = prop_env(&p, &g, seed ^ 0xb0d);
            let bwd = derive_backward(&p).unwrap();
            let fwd = run_forward(&p, &env).unwrap();
            let mut benv = fwd.clone();
            let mut seed_t = fwd.get("out").unwrap().clone();
            seed_t.data_mut().fill(1.0);
            benv.bind("seed__out", seed_t);
            let direct = run_forward(&bwd, &benv).unwrap();
            for layout in [Layout::Vanilla, Layout::Compact] {
                for adjacency in [Adjacency::Coo, Adjacency::Csr] {
                    let plan = lower(
                        &bwd,
                        LowerOptions {
                            layout,
                            adjacency,
                            schedule: GemmSchedule::default(),
                        },
                    );
                    assert!(plan.coverage_counts().iter().all(|&c| c == 1));
                    // weight gradients come out of scatter-GEMMs with atomics
                    if model == ModelKind::Rgcn && layout == Layout::Vanilla {
                        assert!(plan
                            .gemms
                            .iter()
                            .any(|g| g.atomic_output && g.op.op == rgnnc_core::ir::OpKind::OuterProd));
                    }
                    let got = run_plan(&plan, &benv).unwrap();
                    for o in &bwd.outputs {
                        let err = got.get(o).unwrap().max_rel_err(direct.get(o).unwrap());
                        assert!(
                            err <= 1e-9,
                            "seed {seed} {model:?} {layout:?} {adjacency:?} {o}: {err:.3e}"
                        );
                    }
                }
            }
        }
    }
}

/// The interpreter refuses plans whose preprocessing is missing, naming
/// the step.
#[test]
fn run_plan_names_missing_preprocessing() {
    use rgnnc_core::interp::ExecError;
    use rgnnc_core::zoo::{build_model, dims_for, ModelKind, ModelOptions};
    let g = prop_graph(0);
    let dims = dims_for(&g, 3, 3);
    let p = build_model(ModelKind::Rgcn, &dims, &ModelOptions::default());
    let env_full = prop_env(&p, &g, 0);

    let plan_csr = lower(
        &p,
        LowerOptions {
            layout: Layout::Vanilla,
            adjacency: Adjacency::Csr,
            schedule: GemmSchedule::default(),
        },
    );
    let mut env = env_full.clone();
    env.csr = None;
    assert_eq!(
        run_plan(&plan_csr, &env).unwrap_err(),
        ExecError::MissingPreprocessing("coo_to_csr")
    );

    let plan_compact = lower(
        &p,
        LowerOptions {
            layout: Layout::Compact,
            adjacency: Adjacency::Coo,
            schedule: GemmSchedule::default(),
        },
    );
    let mut env = env_full.clone();
    env.compact = None;
    assert_eq!(
        run_plan(&plan_compact, &env).unwrap_err(),
        ExecError::MissingPreprocessing("build_compact_index")
    );
}
