use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rankfold::decompose::{Method, ProposalGrid};
use rankfold::estimators::SizeMode;
use rankfold::ir::{deserialize, ArchName};
use rankfold::pipeline::{self, ModelSummary, RunConfig, PLANS_FILE, REPORT_FILE};
use rankfold::search::{Choice, Solver};
use rankfold::Error;

#[derive(Parser)]
#[command(name = "rankfold", version, about = "Low-rank CNN compression under a size budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a reference architecture with seeded weights.
    Arch {
        /// resnet18, stresnet_pico, stresnet_micro, stresnet_tiny or testnet_small
        name: ArchName,
        #[arg(long, default_value_t = 1000)]
        num_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile every rank proposal and write the candidate tables.
    Tables(Opts),
    /// Pick the top-k rank assignments for a budget from prebuilt tables.
    Search(Opts),
    /// Apply one plan to a model.
    Rewrite(Opts),
    /// Compare two models on the same calibration inputs.
    Eval {
        #[command(flatten)]
        opts: Opts,
        /// model compared against `--model`
        #[arg(long)]
        compare: PathBuf,
    },
    /// Print a model summary.
    Info {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args, Default)]
struct Opts {
    /// TOML run config; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// tables directory (search)
    #[arg(long)]
    tables: Option<PathBuf>,
    /// plans file (rewrite)
    #[arg(long)]
    plans: Option<PathBuf>,
    /// 1-based plan to apply (rewrite)
    #[arg(long, default_value_t = 1)]
    plan_rank: usize,
    #[arg(long)]
    grid_start: Option<usize>,
    /// comma-separated grid increments; the last one repeats
    #[arg(long, value_delimiter = ',')]
    grid_steps: Option<Vec<usize>>,
    #[arg(long)]
    calib_batches: Option<usize>,
    #[arg(long)]
    calib_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "target_compression")]
    flash_max: Option<i64>,
    #[arg(long)]
    target_compression: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    /// exact_bnb or exact_dp
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    dp_scale: Option<i64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    size_mode: Option<SizeMode>,
}

impl Opts {
    /// Config file (if any) with every given flag applied on top.
    fn resolve(&self) -> rankfold::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.grid_start.is_some() || self.grid_steps.is_some() {
            let start = self.grid_start.unwrap_or(cfg.grid.start);
            let steps = self.grid_steps.clone().unwrap_or_else(|| cfg.grid.steps.clone());
            cfg.grid = ProposalGrid::new(start, steps)?;
        }
        if let Some(b) = self.calib_batches {
            cfg.calib.batches = b;
        }
        if let Some(s) = self.calib_size {
            cfg.calib.batch_size = s;
        }
        if let Some(s) = self.seed {
            cfg.calib.seed = s;
        }
        if let Some(f) = self.flash_max {
            cfg.budget.flash_max = Some(f);
            cfg.budget.target_compression = None;
        }
        if let Some(c) = self.target_compression {
            cfg.budget.target_compression = Some(c);
            cfg.budget.flash_max = None;
        }
        if let Some(k) = self.topk {
            cfg.search.k = k;
        }
        if let Some(s) = self.solver {
            cfg.search.solver = s;
        }
        if self.dp_scale.is_some() {
            cfg.search.dp_scale = self.dp_scale;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.size_mode {
            cfg.size_mode = s;
        }
        cfg.calib.validate()?;
        cfg.search.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> rankfold::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing {flag} (flag or config key)")))
}

fn print_summary(s: &ModelSummary, verbose: bool) {
    if verbose {
        println!("{:<28} {:<10} {:>10}  candidate", "layer", "kind", "params");
        for l in &s.layers {
            println!(
                "{:<28} {:<10} {:>10}  {}",
                l.id,
                l.kind,
                l.params,
                if l.candidate { "yes" } else { "" }
            );
        }
    }
    println!("model: {}", s.name);
    println!("input: {}x{}x{}", s.input_shape[0], s.input_shape[1], s.input_shape[2]);
    println!("params: {} ({:.2}M)", s.params, s.params as f64 / 1e6);
    println!("bytes: {}", s.bytes);
    println!("candidate layers: {}", s.candidate_layers);
    println!("weights checksum: {}", s.weights_checksum);
}

fn run(cli: Cli) -> rankfold::Result<()> {
    match cli.command {
        Command::Arch {
            name,
            num_classes,
            seed,
            out,
        } => {
            let s = pipeline::cmd_arch(name, num_classes, seed, &out)?;
            print_summary(&s, true);
            println!("wrote {}", out.display());
        }
        Command::Info { model } => print_summary(&pipeline::cmd_info(&model)?, true),
        Command::Tables(opts) => {
            let cfg = opts.resolve()?;
            let model = required(&cfg.model, "--model")?;
            let out = required(&cfg.out, "--out")?;
            let run = pipeline::cmd_tables(model, &cfg, out)?;
            println!("candidate layers: {}", run.candidate_layers);
            println!("candidates: {}", run.table.entries.len());
            println!("reference size ({}): {}", cfg.size_mode, run.table.reference_size());
            println!("wall time: {:.2}s", run.wall_seconds);
            println!("wrote {}", out.display());
        }
        Command::Search(opts) => {
            let cfg = opts.resolve()?;
            let tables = opts
                .tables
                .as_deref()
                .or(cfg.out.as_deref())
                .ok_or_else(|| Error::Config("missing --tables".into()))?;
            let out = opts.out.as_deref().unwrap_or(tables);
            let budget = cfg.budget.budget()?;
            let report = pipeline::cmd_search(tables, &budget, &cfg.search, out)?;
            println!(
                "solver: {}  reference: {}  budget: {}  min achievable: {}",
                report.solver, report.reference_size, report.flash_max, report.min_achievable_size
            );
            println!(
                "nodes expanded: {}  proven optimal: {}",
                report.nodes_expanded, report.proven_optimal
            );
            if report.fewer_than_k {
                println!("only {} feasible plans exist", report.plans.len());
            }
            println!("{:>4} {:>14} {:>14} {:>10}", "rank", "delta_acc", "size", "decomposed");
            for p in &report.plans {
                let n = p.choices.iter().filter(|c| c.choice != Choice::Keep).count();
                println!(
                    "{:>4} {:>14.6e} {:>14} {:>10}",
                    p.rank_in_topk, p.predicted_total_delta_acc, p.predicted_size, n
                );
            }
            println!("wrote {}", out.join(PLANS_FILE).display());
        }
        Command::Rewrite(opts) => {
            let cfg = opts.resolve()?;
            let model = required(&cfg.model, "--model")?;
            let out = required(&cfg.out, "--out")?;
            let plans_path = required(&opts.plans, "--plans")?;
            let plans = pipeline::read_plans(plans_path)?;
            let r = pipeline::cmd_rewrite(model, &plans, opts.plan_rank, cfg.method, &cfg.calib, out)?;
            println!("{:<28} {:>5} {:>5} {:>12} {:>12}", "layer", "r1", "r2", "local", "propagated");
            for l in &r.layers {
                println!(
                    "{:<28} {:>5} {:>5} {:>12.4e} {:>12.4e}",
                    l.layer_id, l.r1, l.r2, l.local_nmse, l.propagated_nmse
                );
            }
            println!("params: {} -> {}", r.reference_params, r.achieved_params);
            println!("bytes: {} -> {}", r.reference_bytes, r.achieved_bytes);
            println!("compression: {:.3}x", r.compression_ratio);
            println!("predicted size: {}  achieved: {}", r.predicted_size, r.achieved_size());
            println!("output nmse: {:.4e}", r.output_nmse);
            println!("wrote {}", out.join(REPORT_FILE).display());
        }
        Command::Eval { opts, compare } => {
            let cfg = opts.resolve()?;
            let a = deserialize(required(&cfg.model, "--model")?)?;
            let b = deserialize(&compare)?;
            let r = pipeline::cmd_eval(&a, &b, &cfg.calib)?;
            for (id, v) in &r.layers {
                println!("{id:<28} {v:>12.4e}");
            }
            println!("params: {} vs {}", r.params_a, r.params_b);
            println!("compression: {:.3}x", r.compression_ratio);
            println!("output nmse: {:.4e}", r.output_nmse);
            if let Some(out) = &cfg.out {
                pipeline::write_eval_report(&r, out)?;
                println!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Infeasible { .. } => 3,
        Error::Malformed { .. } | Error::Table(_) | Error::Json(_) | Error::Csv(_) | Error::Graph(_) => 4,
        Error::Shape { .. } | Error::UnknownLayer(_) => 5,
        Error::Numeric(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
