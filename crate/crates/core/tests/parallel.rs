//! The deterministic-reduction contract: parallel execution partitions
//! work by output row (and by aggregation target) while keeping every
//! per-target reduction in the sequential order, so results are
//! bit-identical to sequential execution.

#![cfg(feature = "parallel")]

use rgnnc_core::graph::{DegreeModel, HeteroGraph, SynthSpec};
use rgnnc_core::interp::{run_forward_mode, run_plan_mode};
use rgnnc_core::kernel::{Adjacency, GemmSchedule, Layout};
use rgnnc_core::lower::{lower, LowerOptions};
use rgnnc_core::tensor::ExecMode;
use rgnnc_core::zoo::{build_model, dims_for, standard_env, ModelKind, ModelOptions};

#[test]
fn parallel_is_bit_identical_to_sequential() {
    for seed in 0..8u64 {
        let g = HeteroGraph::generate_synthetic(
            &SynthSpec {
                node_counts: vec![40, 24],
                edge_type_count: 3,
                edge_count: 500,
                allow_duplicates: true,
                degree: DegreeModel::SkewedSrc { exponent: 0.8 },
            },
            seed,
        )
        .unwrap()
        .sort_edges_by_type();
        let dims = dims_for(&g, 16, 16);
        for model in ModelKind::all() {
            let p = build_model(model, &dims, &ModelOptions::default());
            let env = standard_env(&p, &g, seed);
            let seq = run_forward_mode(&p, &env, ExecMode::Sequential).unwrap();
            let par = run_forward_mode(&p, &env, ExecMode::Parallel).unwrap();
            for (name, t) in &seq.bindings {
                assert_eq!(t, &par.bindings[name], "{model:?} forward binding {name}");
            }
            for layout in [Layout::Vanilla, Layout::Compact] {
                for adjacency in [Adjacency::Coo, Adjacency::Csr] {
                    let plan = lower(
                        &p,
                        LowerOptions {
                            layout,
                            adjacency,
                            schedule: GemmSchedule::default(),
                        },
                    );
                    let seq = run_plan_mode(&plan, &env, ExecMode::Sequential).unwrap();
                    let par = run_plan_mode(&plan, &env, ExecMode::Parallel).unwrap();
                    assert_eq!(
                        seq.get("out").unwrap(),
                        par.get("out").unwrap(),
                        "{model:?} {layout:?} {adjacency:?}"
                    );
                }
            }
        }
    }
}
