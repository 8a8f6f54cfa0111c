//! `aggnas`: data generation, search, pruning, retraining, evaluation and
//! the ablation matrix from one JSON run config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggnas::aggregation::{DerivedArchitecture, PruneConfig};
use aggnas::config::{apply_override, RunConfig};
use aggnas::pipeline;
use aggnas::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "aggnas", version, about = "Differentiable search of segmentation networks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set search.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`; also seeds search and retraining.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set paths.data_dir=DIR`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Shorthand for `--set paths.out_dir=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set prune.tau=T`.
    #[arg(long, global = true)]
    tau: Option<String>,
    /// Shorthand for `--set search.epochs=N`.
    #[arg(long, global = true)]
    search_epochs: Option<usize>,
    /// Shorthand for `--set retrain.epochs=N`.
    #[arg(long, global = true)]
    retrain_epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `paths.data_dir`.
    GenData,
    /// Bi-level search; writes `<out>/search/{checkpoint,metrics.csv,config.json}`.
    Search,
    /// Threshold and cascade a searched checkpoint into a discrete graph.
    Prune {
        /// Search run or checkpoint directory [default: <out>/search].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Disable the connectivity fallback.
        #[arg(long)]
        no_fallback: bool,
        /// Destination for graph.json and graph.dot [default: <out>/derived].
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train a derived graph from scratch and report validation Dice.
    Retrain {
        /// Derived graph [default: <out>/derived/graph.json].
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Destination [default: <out>/retrain].
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Validation Dice of a saved network.
    Eval {
        /// Run or checkpoint directory [default: <out>/retrain].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the DOT rendering of a derived graph.
    ExportDot {
        /// Derived graph [default: <out>/derived/graph.json].
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// SBB × MSSA on/off grid plus the τ sweep over `ablation.seeds`.
    Ablate {
        /// Comma-separated thresholds for the sweep, e.g. `0.6,0.75,0.9`.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let origin = g.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
    let mut doc = match &g.config {
        Some(path) => RunConfig::load_value(path)?,
        None => serde_json::json!({}),
    };
    if let Some(obj) = doc.as_object_mut() {
        obj.remove("config_hash");
    }
    let path_str = |p: &Path| serde_json::Value::String(p.display().to_string()).to_string();
    let mut sets: Vec<(String, String)> = Vec::new();
    if let Some(p) = &g.data {
        sets.push(("paths.data_dir".into(), path_str(p)));
    }
    if let Some(p) = &g.out {
        sets.push(("paths.out_dir".into(), path_str(p)));
    }
    if let Some(t) = &g.tau {
        sets.push(("prune.tau".into(), t.clone()));
    }
    if let Some(n) = g.search_epochs {
        sets.push(("search.epochs".into(), n.to_string()));
    }
    if let Some(n) = g.retrain_epochs {
        sets.push(("retrain.epochs".into(), n.to_string()));
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in &sets {
        apply_override(&mut doc, k, v)?;
    }
    let cfg = RunConfig::from_json_value(doc, &origin)?;
    Ok(match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_graph(path: &Path) -> Result<DerivedArchitecture> {
    DerivedArchitecture::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    let out = cfg.paths.out_dir.clone();
    match cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg)?;
            println!("wrote {} samples to {}", ds.samples.len(), cfg.paths.data_dir.display());
        }
        Command::Search => {
            let data = pipeline::load_data(&cfg)?;
            let dir = out.join("search");
            let s = pipeline::run_search(&cfg, &data, &dir)?;
            let sep = s.net.gate_separation().map_or("-".into(), |v| format!("{v:.4}"));
            println!("search done: {} epochs, gate separation {sep}, config {}", s.epoch(), cfg.hash());
            println!("checkpoint: {}", dir.join("checkpoint").display());
        }
        Command::Prune {
            checkpoint,
            no_fallback,
            dest,
        } => {
            if no_fallback {
                cfg.prune.fallback_connectivity = false;
            }
            let ckpt = checkpoint.unwrap_or_else(|| out.join("search"));
            let arch = pipeline::derive_from_checkpoint(&ckpt, &cfg.prune)?;
            let dest = dest.unwrap_or_else(|| out.join("derived"));
            cfg.write_resolved(&dest)?;
            pipeline::write_architecture(&arch, &dest)?;
            print!("{}", pipeline::prune_report(&arch));
            println!("graph: {}", dest.join("graph.json").display());
        }
        Command::Retrain { graph, dest } => {
            let data = pipeline::load_data(&cfg)?;
            let graph = graph.unwrap_or_else(|| out.join("derived").join("graph.json"));
            let arch = load_graph(&graph)?;
            let dest = dest.unwrap_or_else(|| out.join("retrain"));
            let (_, dice) = pipeline::run_retrain(&cfg, &arch, &data, &dest)?;
            println!("validation dice {:.4} per class {:?}", dice.mean, dice.per_class);
        }
        Command::Eval { checkpoint } => {
            let data = pipeline::load_data(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join("retrain"));
            let dice = pipeline::evaluate_checkpoint(&ckpt, &data)?;
            println!("validation dice {:.4} per class {:?}", dice.mean, dice.per_class);
        }
        Command::ExportDot { graph, output } => {
            let graph = graph.unwrap_or_else(|| out.join("derived").join("graph.json"));
            let dot = load_graph(&graph)?.to_dot();
            match output {
                Some(p) => std::fs::write(&p, dot).map_err(|e| Error::io(&p, e))?,
                None => print!("{dot}"),
            }
        }
        Command::Ablate { taus, seeds } => {
            if let Some(t) = taus {
                for &tau in &t {
                    PruneConfig::new(tau)?;
                }
                cfg.ablation.taus = t;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            let data = pipeline::load_data(&cfg)?;
            let dir = out.join("ablation");
            info!("ablation over seeds {:?} into {}", cfg.ablation.seeds, dir.display());
            let report = pipeline::run_ablation(&cfg, &data, &dir)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = pipeline::threads_from_env();
    // Only the dataset generator uses the global pool; ablation cells get their own.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
