//! Command-line driver: compile layer programs to kernel bundles, execute
//! them on concrete graphs, and report checks, operation counts, and the
//! memory model as JSON (schemas in `docs/reports.md`).

mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgnnc_core::graph::{DegreeModel, HeteroGraph, SynthSpec};
use rgnnc_core::ir::DimsConfig;
use rgnnc_core::kernel::{Adjacency, GemmSchedule, Layout};
use rgnnc_core::zoo::{Activation, ModelKind, ModelOptions};

#[derive(Parser)]
#[command(name = "rgnnc", version, about = "Relational GNN kernel compiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model to build: rgcn | rgat | hgt
    #[arg(long)]
    model: String,
    /// Graph TSV path, or `synth:nodes=N,etypes=K,edges=E[,ntypes=T]`
    /// (seeded by RGNNC_SEED, default 0)
    #[arg(long)]
    graph: String,
    /// Input feature dimension
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Output feature dimension (defaults to `hidden`)
    #[arg(long)]
    out_dim: Option<usize>,
    /// Materialize compact-applicable edgewise tensors per unique pair
    #[arg(long)]
    compact: bool,
    /// Reorder linear operator chains into weight-weight products
    #[arg(long)]
    reorder: bool,
    /// Adjacency scheme: coo | csr
    #[arg(long, default_value = "coo")]
    adjacency: String,
    /// GEMM tile width
    #[arg(long, default_value_t = 16)]
    tile: usize,
    /// GEMM coarsening factor: 1, 2 or 4
    #[arg(long, default_value_t = 1)]
    coarsen: usize,
    /// Negative slope of the leaky rectifier
    #[arg(long, default_value_t = 0.2)]
    leaky_slope: f64,
    /// Output activation: identity | leakyrelu | exp
    #[arg(long, default_value = "identity")]
    activation: String,
}

#[derive(Subcommand)]
enum Command {
    /// Lower a model and emit the kernel bundle
    Compile {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for the bundle (not needed with --dump-ir)
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print the optimized program IR as text and exit
        #[arg(long)]
        dump_ir: bool,
        /// Keep input-feature gradients in the backward program
        #[arg(long)]
        grad_features: bool,
    },
    /// Execute a lowered plan on an environment
    Run {
        #[command(flatten)]
        model: ModelArgs,
        /// Seed for the generated environment
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Load bindings from a saved environment directory
        #[arg(long)]
        load_env: Option<PathBuf>,
        /// Save the resulting environment here
        #[arg(long)]
        save_env: Option<PathBuf>,
        /// Write the JSON report here instead of stdout
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Pass-equivalence and gradient suite for one model and graph
    Check {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Multiply/add counts, before and after reordering
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Bytes per tensor under vanilla and compact materialization
    Memreport {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

pub(crate) struct Resolved {
    pub model: ModelKind,
    pub graph: HeteroGraph,
    pub dims: DimsConfig,
    pub opts: ModelOptions,
    pub layout: Layout,
    pub adjacency: Adjacency,
    pub schedule: GemmSchedule,
    pub reorder: bool,
    pub graph_desc: String,
}

fn parse_synth(spec: &str) -> Result<HeteroGraph, String> {
    let mut nodes = 16usize;
    let mut ntypes = 2usize;
    let mut etypes = 2usize;
    let mut edges = 64usize;
    let mut dup = true;
    for field in spec.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("bad synth field {field:?}"))?;
        let n: usize = v.parse().map_err(|_| format!("bad number in {field:?}"))?;
        match k {
            "nodes" => nodes = n,
            "ntypes" => ntypes = n,
            "etypes" => etypes = n,
            "edges" => edges = n,
            "dup" => dup = n != 0,
            other => return Err(format!("unknown synth field {other:?}")),
        }
    }
    if ntypes == 0 || nodes < ntypes {
        return Err("need nodes >= ntypes >= 1".into());
    }
    let seed: u64 = std::env::var("RGNNC_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut counts = vec![nodes / ntypes; ntypes];
    counts[0] += nodes % ntypes;
    let spec = SynthSpec {
        node_counts: counts,
        edge_type_count: etypes,
        edge_count: edges,
        allow_duplicates: dup,
        degree: DegreeModel::Uniform,
    };
    HeteroGraph::generate_synthetic(&spec, seed).map_err(|e| e.to_string())
}

impl ModelArgs {
    fn resolve(&self) -> Result<Resolved, String> {
        let model = ModelKind::parse(&self.model)
            .ok_or_else(|| format!("unknown model {:?} (rgcn | rgat | hgt)", self.model))?;
        let graph = if let Some(spec) = self.graph.strip_prefix("synth:") {
            parse_synth(spec)?
        } else {
            let text = std::fs::read_to_string(&self.graph)
                .map_err(|e| format!("cannot read {}: {e}", self.graph))?;
            HeteroGraph::parse_tsv(&text).map_err(|e| e.to_string())?
        };
        let graph = graph.sort_edges_by_type();
        if graph.num_edge_types() == 0 || graph.num_node_types() == 0 {
            return Err("graph needs at least one node and edge type".into());
        }
        let out_dim = self.out_dim.unwrap_or(self.hidden);
        if self.hidden == 0 || out_dim == 0 {
            return Err("dimensions must be positive".into());
        }
        let adjacency = match self.adjacency.as_str() {
            "coo" => Adjacency::Coo,
            "csr" => Adjacency::Csr,
            other => return Err(format!("unknown adjacency {other:?} (coo | csr)")),
        };
        let activation = Activation::parse(&self.activation)
            .ok_or_else(|| format!("unknown activation {:?}", self.activation))?;
        let schedule = GemmSchedule {
            tile_width: self.tile,
            coarsening_factor: self.coarsen,
            register_limit_hint: None,
        };
        schedule.validate().map_err(|e| e.to_string())?;
        Ok(Resolved {
            model,
            dims: DimsConfig::new(
                self.hidden,
                out_dim,
                graph.num_edge_types(),
                graph.num_node_types(),
            ),
            opts: ModelOptions {
                leaky_slope: self.leaky_slope,
                activation,
            },
            layout: if self.compact {
                Layout::Compact
            } else {
                Layout::Vanilla
            },
            adjacency,
            schedule,
            reorder: self.reorder,
            graph_desc: self.graph.clone(),
            graph,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile {
            model,
            out,
            dump_ir,
            grad_features,
        } => model
            .resolve()
            .and_then(|r| report::compile(&r, out.as_deref(), dump_ir, grad_features)),
        Command::Run {
            model,
            seed,
            load_env,
            save_env,
            out,
        } => model.resolve().and_then(|r| {
            report::run(
                &r,
                seed,
                load_env.as_deref(),
                save_env.as_deref(),
                out.as_deref(),
            )
        }),
        Command::Check { model, seed, out } => model
            .resolve()
            .and_then(|r| report::check(&r, seed, out.as_deref())),
        Command::Flops { model, out } => model
            .resolve()
            .and_then(|r| report::flops(&r, out.as_deref())),
        Command::Memreport { model, out } => model
            .resolve()
            .and_then(|r| report::memreport(&r, out.as_deref())),
    };
    match result {
        Ok(passed) => {
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
