//! Subcommand implementations and their JSON reports.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Value};

use rgnnc_core::emit::emit_plan;
use rgnnc_core::interp::{
    grad_check_all_weights, load_env_dir, run_forward, run_plan, save_env_dir, Environment,
};
use rgnnc_core::ir::autodiff::derive_backward;
use rgnnc_core::ir::flops::count_flops;
use rgnnc_core::ir::passes::{canonicalize_loops, fuse_loops, prune_unused_gradients, reorder_linear_ops};
use rgnnc_core::ir::{DeclKind, Program};
use rgnnc_core::kernel::{Adjacency, Layout};
use rgnnc_core::lower::{lower, KernelPlan, LowerOptions};
use rgnnc_core::zoo::{build_model, memreport as zoo_memreport, standard_env, ModelKind};

use crate::Resolved;

fn emit_report(value: &Value, out: Option<&Path>) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| e.to_string()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn graph_summary(r: &Resolved) -> Value {
    json!({
        "source": r.graph_desc,
        "nodes": r.graph.num_nodes(),
        "edges": r.graph.num_edges(),
        "node_types": r.graph.num_node_types(),
        "edge_types": r.graph.num_edge_types(),
    })
}

/// Build the (optionally reordered) program for a resolved invocation.
pub(crate) fn build_program(r: &Resolved) -> (Program, Environment) {
    let p = build_model(r.model, &r.dims, &r.opts);
    let env = Environment::with_preprocessing(r.graph.clone());
    let p = if r.reorder {
        let stats = env.stats.clone().expect("stats built");
        reorder_linear_ops(&p, &stats).0
    } else {
        p
    };
    (p, env)
}

fn lower_opts(r: &Resolved) -> LowerOptions {
    LowerOptions {
        layout: r.layout,
        adjacency: r.adjacency,
        schedule: r.schedule,
    }
}

fn weight_grad_names(p: &Program) -> BTreeSet<String> {
    p.inputs
        .iter()
        .filter(|d| d.kind == DeclKind::Weight)
        .map(|d| format!("g__{}", d.name))
        .collect()
}

fn plan_summary(plan: &KernelPlan) -> Value {
    json!({
        "gemm_instances": plan.gemms.len(),
        "traversal_instances": plan.traversals.len(),
        "fallback_ops": plan.fallback.len(),
        "text": plan.to_text(),
    })
}

pub(crate) fn compile(
    r: &Resolved,
    out: Option<&Path>,
    dump_ir: bool,
    grad_features: bool,
) -> Result<bool, String> {
    let (p, _env) = build_program(r);
    let canonical = fuse_loops(&canonicalize_loops(&p));
    if dump_ir {
        print!("{}", canonical.to_text());
        return Ok(true);
    }
    let out = out.ok_or("compile needs --out (or --dump-ir)")?;
    let plan = lower(&p, lower_opts(r));
    let bwd = derive_backward(&p).map_err(|e| e.to_string())?;
    let bwd = if grad_features {
        bwd
    } else {
        let wanted = weight_grad_names(&p);
        prune_unused_gradients(&bwd, &wanted)
    };
    let bwd_plan = lower(&bwd, lower_opts(r));
    let artifact = emit_plan(&plan, Some(&bwd_plan));
    artifact.write_to_dir(out).map_err(|e| e.to_string())?;
    let report = json!({
        "schema_version": 1,
        "command": "compile",
        "model": r.model.label(),
        "graph": graph_summary(r),
        "layout": r.layout.label(),
        "adjacency": r.adjacency.label(),
        "reorder": r.reorder,
        "out_dir": out.display().to_string(),
        "kernels": artifact.manifest.kernels.iter().map(|k| k.name.clone()).collect::<Vec<_>>(),
        "preprocessing": artifact.manifest.preprocessing,
        "forward_plan": plan_summary(&plan),
        "backward_plan": plan_summary(&bwd_plan),
    });
    emit_report(&report, None)?;
    Ok(true)
}

pub(crate) fn run(
    r: &Resolved,
    seed: u64,
    load_env: Option<&Path>,
    save_env: Option<&Path>,
    out: Option<&Path>,
) -> Result<bool, String> {
    let (p, base_env) = build_program(r);
    let mut env = match load_env {
        Some(dir) => {
            let mut env = base_env.clone();
            for (name, tensor) in load_env_dir(dir).map_err(|e| e.to_string())? {
                env.bind(name, tensor);
            }
            env
        }
        None => standard_env(&p, &r.graph, seed),
    };
    // the reordered program shares inputs with the original model
    env.bindings.retain(|k, _| p.input_decl(k).is_some());
    let plan = lower(&p, lower_opts(r));
    let done = run_plan(&plan, &env).map_err(|e| e.to_string())?;
    let mut outputs = serde_json::Map::new();
    for o in &p.outputs {
        let t = done.get(o).map_err(|e| e.to_string())?;
        let sum: f64 = t.data().iter().sum();
        let l2: f64 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        outputs.insert(
            o.clone(),
            json!({ "rows": t.rows(), "cols": t.cols(), "sum": sum, "l2": l2 }),
        );
    }
    if let Some(dir) = save_env {
        save_env_dir(dir, &done.bindings).map_err(|e| e.to_string())?;
    }
    let report = json!({
        "schema_version": 1,
        "command": "run",
        "model": r.model.label(),
        "graph": graph_summary(r),
        "layout": r.layout.label(),
        "adjacency": r.adjacency.label(),
        "reorder": r.reorder,
        "seed": seed,
        "outputs": Value::Object(outputs),
    });
    emit_report(&report, out)?;
    Ok(true)
}

pub(crate) fn check(r: &Resolved, seed: u64, out: Option<&Path>) -> Result<bool, String> {
    let p = build_model(r.model, &r.dims, &r.opts);
    let env = standard_env(&p, &r.graph, seed);
    let stats = env.stats.clone().expect("stats built");
    let base = run_forward(&p, &env).map_err(|e| e.to_string())?;
    let out_name = p.outputs.last().cloned().expect("zoo programs have outputs");
    let base_out = base.get(&out_name).map_err(|e| e.to_string())?.clone();
    let mut properties: Vec<Value> = Vec::new();
    let push = |name: &str, max_err: f64, tol: f64, properties: &mut Vec<Value>| -> bool {
        let passed = max_err <= tol;
        properties.push(json!({
            "name": name, "max_err": max_err, "tolerance": tol, "passed": passed,
        }));
        passed
    };
    let mut all = true;

    // pass equivalence on the interpreter
    let canonical = canonicalize_loops(&p);
    let e1 = run_forward(&canonical, &env)
        .map_err(|e| e.to_string())?
        .get(&out_name)
        .map_err(|e| e.to_string())?
        .max_rel_err(&base_out);
    all &= push("canonicalize_loops", e1, 1e-12, &mut properties);
    let fused = fuse_loops(&canonical);
    let e2 = run_forward(&fused, &env)
        .map_err(|e| e.to_string())?
        .get(&out_name)
        .map_err(|e| e.to_string())?
        .max_rel_err(&base_out);
    all &= push("fuse_loops", e2, 1e-12, &mut properties);
    let (reordered, _) = reorder_linear_ops(&p, &stats);
    let e3 = run_forward(&reordered, &env)
        .map_err(|e| e.to_string())?
        .get(&out_name)
        .map_err(|e| e.to_string())?
        .max_rel_err(&base_out);
    all &= push("reorder_linear_ops", e3, 1e-9, &mut properties);

    // lowered plans against the unoptimized forward
    for layout in [Layout::Vanilla, Layout::Compact] {
        for adjacency in [Adjacency::Coo, Adjacency::Csr] {
            let plan = lower(
                &p,
                LowerOptions {
                    layout,
                    adjacency,
                    schedule: r.schedule,
                },
            );
            let got = run_plan(&plan, &env).map_err(|e| e.to_string())?;
            let err = got
                .get(&out_name)
                .map_err(|e| e.to_string())?
                .max_rel_err(&base_out);
            let name = format!("run_plan_{}_{}", layout.label(), adjacency.label());
            all &= push(&name, err, 1e-9, &mut properties);
        }
    }

    // per-destination attention sums
    if matches!(r.model, ModelKind::Rgat | ModelKind::Hgt) {
        let attn = base.get("attn").map_err(|e| e.to_string())?;
        let g = &env.graph;
        let mut sums = vec![0.0f64; g.num_nodes()];
        for e in 0..g.num_edges() {
            sums[g.dst(e)] += attn.at(e, 0);
        }
        let mut worst = 0.0f64;
        for (v, s) in sums.iter().enumerate() {
            let has_incoming = (0..g.num_edges()).any(|e| g.dst(e) == v);
            if has_incoming {
                worst = worst.max((s - 1.0).abs());
            }
        }
        all &= push("softmax_sums", worst, 1e-9, &mut properties);
    }

    // analytic gradients against central finite differences
    let grad_worst = match grad_check_all_weights(&p, &env, 1e-6, 1e-4) {
        Ok(results) => results.iter().map(|(_, e)| *e).fold(0.0, f64::max),
        Err(e) => return Err(e.to_string()),
    };
    all &= push("gradients", grad_worst, 1e-4, &mut properties);

    // pruning keeps wanted gradients intact
    {
        let bwd = derive_backward(&p).map_err(|e| e.to_string())?;
        let wanted = weight_grad_names(&p);
        let pruned = prune_unused_gradients(&bwd, &wanted);
        let mut benv = base.clone();
        let seed_tensor = {
            let mut t = base_out.clone();
            t.data_mut().fill(1.0);
            t
        };
        benv.bind(format!("seed__{out_name}"), seed_tensor);
        let full = run_forward(&bwd, &benv).map_err(|e| e.to_string())?;
        let cut = run_forward(&pruned, &benv).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for w in &wanted {
            worst = worst.max(
                cut.get(w)
                    .map_err(|e| e.to_string())?
                    .max_rel_err(full.get(w).map_err(|e| e.to_string())?),
            );
        }
        all &= push("prune_unused_gradients", worst, 1e-12, &mut properties);
    }

    let report = json!({
        "schema_version": 1,
        "command": "check",
        "model": r.model.label(),
        "graph": graph_summary(r),
        "seed": seed,
        "properties": properties,
        "passed": all,
    });
    emit_report(&report, out)?;
    Ok(all)
}

pub(crate) fn flops(r: &Resolved, out: Option<&Path>) -> Result<bool, String> {
    let p = build_model(r.model, &r.dims, &r.opts);
    let env = Environment::with_preprocessing(r.graph.clone());
    let stats = env.stats.clone().expect("stats built");
    let before = count_flops(&p, &stats, r.layout);
    let (after, records) = if r.reorder {
        let (p2, records) = reorder_linear_ops(&p, &stats);
        (
            Some(count_flops(&p2, &stats, r.layout)),
            records
                .iter()
                .map(|rec| {
                    json!({
                        "dot_result": rec.dot_result,
                        "ww_name": rec.ww_name,
                        "before_multiplies": rec.before_multiplies,
                        "after_multiplies": rec.after_multiplies,
                    })
                })
                .collect::<Vec<_>>(),
        )
    } else {
        (None, Vec::new())
    };
    let report = json!({
        "schema_version": 1,
        "command": "flops",
        "model": r.model.label(),
        "graph": graph_summary(r),
        "layout": r.layout.label(),
        "reorder": r.reorder,
        "before": serde_json::to_value(&before).expect("serializable"),
        "after": after.map(|a| serde_json::to_value(&a).expect("serializable")),
        "reorder_records": records,
    });
    emit_report(&report, out)?;
    Ok(true)
}

pub(crate) fn memreport(r: &Resolved, out: Option<&Path>) -> Result<bool, String> {
    let p = build_model(r.model, &r.dims, &r.opts);
    let g = &r.graph;
    let ci = g.build_compact_index();
    let m = zoo_memreport(&p, g, &ci);
    let report = json!({
        "schema_version": 1,
        "command": "memreport",
        "model": r.model.label(),
        "graph": graph_summary(r),
        "report": serde_json::to_value(&m).expect("serializable"),
    });
    emit_report(&report, out)?;
    Ok(true)
}
