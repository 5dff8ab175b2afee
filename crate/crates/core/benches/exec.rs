//! Parallel versus sequential execution of the interpreter and the
//! lowered plans on a mid-sized synthetic graph.
//!
//! Run with `cargo bench -p rgnnc-core`; build with
//! `--no-default-features` to confirm the sequential fallback still
//! drives everything (the parallel benches simply disappear).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use rgnnc_core::graph::{DegreeModel, HeteroGraph, SynthSpec};
use rgnnc_core::interp::{run_forward_mode, run_plan_mode, Environment};
use rgnnc_core::ir::Program;
use rgnnc_core::kernel::{Adjacency, GemmSchedule, Layout};
use rgnnc_core::lower::{lower, KernelPlan, LowerOptions};
use rgnnc_core::tensor::ExecMode;
use rgnnc_core::zoo::{build_model, dims_for, standard_env, ModelKind, ModelOptions};

fn setup(model: ModelKind) -> (Program, KernelPlan, KernelPlan, Environment) {
    let g = HeteroGraph::generate_synthetic(
        &SynthSpec {
            node_counts: vec![1200, 800],
            edge_type_count: 4,
            edge_count: 20_000,
            allow_duplicates: true,
            degree: DegreeModel::SkewedSrc { exponent: 0.9 },
        },
        7,
    )
    .unwrap()
    .sort_edges_by_type();
    let dims = dims_for(&g, 64, 64);
    let p = build_model(model, &dims, &ModelOptions::default());
    let env = standard_env(&p, &g, 7);
    let vanilla = lower(&p, LowerOptions::default());
    let compact = lower(
        &p,
        LowerOptions {
            layout: Layout::Compact,
            adjacency: Adjacency::Coo,
            schedule: GemmSchedule::default(),
        },
    );
    (p, vanilla, compact, env)
}

fn bench_model(c: &mut Criterion, model: ModelKind) {
    let (p, vanilla, compact, env) = setup(model);
    let name = model.label();

    let mut group = c.benchmark_group(format!("{name}/forward"));
    group.bench_function("seq", |b| {
        b.iter(|| black_box(run_forward_mode(&p, &env, ExecMode::Sequential).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |b| {
        b.iter(|| black_box(run_forward_mode(&p, &env, ExecMode::Parallel).unwrap()))
    });
    group.finish();

    let mut group = c.benchmark_group(format!("{name}/plan_vanilla"));
    group.bench_function("seq", |b| {
        b.iter(|| black_box(run_plan_mode(&vanilla, &env, ExecMode::Sequential).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |b| {
        b.iter(|| black_box(run_plan_mode(&vanilla, &env, ExecMode::Parallel).unwrap()))
    });
    group.finish();

    let mut group = c.benchmark_group(format!("{name}/plan_compact"));
    group.bench_function("seq", |b| {
        b.iter(|| black_box(run_plan_mode(&compact, &env, ExecMode::Sequential).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |b| {
        b.iter(|| black_box(run_plan_mode(&compact, &env, ExecMode::Parallel).unwrap()))
    });
    group.finish();
}

fn benches(c: &mut Criterion) {
    bench_model(c, ModelKind::Rgcn);
    bench_model(c, ModelKind::Rgat);
}

criterion_group! {
    name = exec;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(exec);
