//! End-to-end stages shared by the command line and the acceptance suite:
//! data generation, search, derivation, retraining, evaluation and the
//! ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{derive_architecture, DerivedArchitecture, Network, PruneConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tasks::{Dataset, DiceReport};
use crate::trainer::{
    evaluate, retrain_derived, write_metrics_csv, Checkpoint, EpochSummary, Searcher, Trainer,
};

pub const THREADS_ENV: &str = "AGGNAS_THREADS";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializes"))
}

fn log_epoch(label: &str) -> impl FnMut(&EpochSummary) + '_ {
    move |s| {
        info!(
            "{label} epoch {} loss_w {:.4} loss_arch {} gate_sep {} dice {:.3}",
            s.epoch,
            s.loss_w,
            s.loss_arch.map_or("-".into(), |v| format!("{v:.4}")),
            s.gate_separation.map_or("-".into(), |v| format!("{v:.3}")),
            s.dice
        )
    }
}

/// Generates the configured dataset and writes it to `paths.data_dir`.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::generate(&cfg.task)?;
    ds.save(&cfg.paths.data_dir, &cfg.hash())?;
    Ok(ds)
}

/// Loads the dataset at `paths.data_dir`; its spec must match the config.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.paths.data_dir)?;
    if ds.spec != cfg.task {
        return Err(Error::config(
            "task",
            format!("differs from the dataset manifest in {}", cfg.paths.data_dir.display()),
        ));
    }
    Ok(ds)
}

/// Runs the bi-level search and leaves `checkpoint/`, `metrics.csv` and
/// `config.json` in `out`.
pub fn run_search(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<Searcher> {
    let searcher = search_in_memory(cfg, data)?;
    save_search(cfg, &searcher, out)?;
    Ok(searcher)
}

pub fn search_in_memory(cfg: &RunConfig, data: &Dataset) -> Result<Searcher> {
    cfg.validate()?;
    let net = Network::supernet(&cfg.network_config(), cfg.seed)?;
    let mut searcher = Searcher::new(net, cfg.search.clone(), data.train().len())?;
    searcher.run(data.train(), log_epoch("search"))?;
    Ok(searcher)
}

pub fn save_search(cfg: &RunConfig, searcher: &Searcher, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    Checkpoint {
        kind: "search".into(),
        config_hash: cfg.hash(),
        network: searcher.net.clone(),
        optimizers: vec![
            ("weights".into(), searcher.weight_opt.clone()),
            ("arch".into(), searcher.arch_opt.clone()),
        ],
        epoch: searcher.epoch(),
        step: searcher.step(),
        history: searcher.history().to_vec(),
        run_config: serde_json::to_value(cfg).expect("config serializes"),
    }
    .save(&out.join("checkpoint"))?;
    write_metrics_csv(&out.join("metrics.csv"), &cfg.hash(), searcher.rows())
}

/// Accepts either a checkpoint directory or a run directory holding one.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    if Checkpoint::manifest_path(path).exists() {
        path.to_path_buf()
    } else {
        path.join("checkpoint")
    }
}

/// Derives the discrete architecture of a searched network.
pub fn derive(net: &Network, prune: &PruneConfig, config_hash: &str) -> Result<DerivedArchitecture> {
    let mut arch = derive_architecture(net, prune)?;
    arch.config_hash = Some(config_hash.to_string());
    Ok(arch)
}

pub fn derive_from_checkpoint(path: &Path, prune: &PruneConfig) -> Result<DerivedArchitecture> {
    let ckpt = Checkpoint::load(&checkpoint_dir(path))?;
    derive(&ckpt.network, prune, &ckpt.config_hash)
}

/// `graph.json` and `graph.dot` in `out`.
pub fn write_architecture(arch: &DerivedArchitecture, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    arch.save(&out.join("graph.json"))?;
    write_text(&out.join("graph.dot"), &arch.to_dot())
}

/// Kept and dropped edges with their gate values, one per line.
pub fn prune_report(arch: &DerivedArchitecture) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "tau {:.2}: {} kept, {} dropped", arch.tau, arch.edges.len(), arch.dropped.len());
    for e in &arch.edges {
        let tag = if e.forced { "forced" } else { "kept" };
        let _ = writeln!(s, "{tag:>7} {}  gate {:.4}", e.edge(), e.gate);
    }
    for e in &arch.dropped {
        let _ = writeln!(s, "{:>7} {}  gate {:.4}", "dropped", e.edge(), e.gate);
    }
    s
}

/// Retrains `arch` from scratch and writes `checkpoint/`, `metrics.csv`,
/// `dice.json`, `graph.json` and `config.json` to `out`.
pub fn run_retrain(cfg: &RunConfig, arch: &DerivedArchitecture, data: &Dataset, out: &Path) -> Result<(Trainer, DiceReport)> {
    let (trainer, dice) = retrain_in_memory(cfg, arch, data)?;
    cfg.write_resolved(out)?;
    write_architecture(arch, out)?;
    Checkpoint {
        kind: "retrain".into(),
        config_hash: cfg.hash(),
        network: trainer.net.clone(),
        optimizers: vec![("weights".into(), trainer.opt.clone())],
        epoch: trainer.epoch(),
        step: trainer.step(),
        history: trainer.history().to_vec(),
        run_config: serde_json::to_value(cfg).expect("config serializes"),
    }
    .save(&out.join("checkpoint"))?;
    write_metrics_csv(&out.join("metrics.csv"), &cfg.hash(), trainer.rows())?;
    let mut doc = serde_json::to_value(&dice).expect("dice serializes");
    if let Some(obj) = doc.as_object_mut() {
        obj.insert("config_hash".into(), serde_json::Value::String(cfg.hash()));
    }
    write_json(&out.join("dice.json"), &doc)?;
    Ok((trainer, dice))
}

pub fn retrain_in_memory(cfg: &RunConfig, arch: &DerivedArchitecture, data: &Dataset) -> Result<(Trainer, DiceReport)> {
    retrain_derived(arch, data.train(), data.val(), &cfg.retrain, cfg.seed, log_epoch("retrain"))
}

/// Validation Dice of a saved network.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset) -> Result<DiceReport> {
    let ckpt = Checkpoint::load(&checkpoint_dir(path))?;
    evaluate(&ckpt.network, data.val())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    pub sbb: bool,
    pub mssa: bool,
    /// Pruning threshold, for settings with searchable gates.
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub setting: String,
    pub seed: u64,
    pub dice: DiceReport,
    pub kept_edges: usize,
    pub forced_edges: usize,
    /// Mean `|σ(β) - 0.5|` at the end of the search, when gates were searched.
    pub gate_separation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub dice: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub per_class_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Name of the row used as the full model.
    pub reference: String,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub const UNET: &str = "unet";
pub const SBB_ONLY: &str = "sbb_only";
pub const MSSA_ONLY: &str = "mssa_only";

pub fn full_setting_name(tau: f64) -> String {
    format!("full_tau{tau:.2}")
}

#[derive(Clone, Copy, Debug)]
enum Job {
    Unet,
    SbbOnly,
    MssaOnly,
    Full,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.name == name)
    }

    /// Markdown table in the layout of the usual ablation table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {} | seeds {:?}", self.config_hash, self.seeds);
        let _ = writeln!(s);
        let _ = writeln!(s, "| SBB | MSSA | tau | mean Dice ± std | median | small | large |");
        let _ = writeln!(s, "|-----|------|-----|-----------------|--------|-------|-------|");
        for r in &self.rows {
            let mark = |b: bool| if b { "✓" } else { " " };
            let tau = r.setting.tau.map_or("-".to_string(), |t| format!("{t:.2}"));
            let classes: Vec<String> = r.per_class_mean.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {tau} | {:.2} ± {:.2} | {:.2} | {} |",
                mark(r.setting.sbb),
                mark(r.setting.mssa),
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * r.median,
                classes.join(" | ")
            );
        }
        s
    }

    /// One line per cell, for plotting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["config_hash", "setting", "seed", "mean_dice", "small_dice", "large_dice", "kept_edges", "forced_edges", "gate_separation"])?;
        for c in &self.cells {
            let class = |i: usize| c.dice.per_class.get(i).map_or(String::new(), |v| v.to_string());
            w.write_record([
                self.config_hash.clone(),
                c.setting.clone(),
                c.seed.to_string(),
                c.dice.mean.to_string(),
                class(0),
                class(1),
                c.kept_edges.to_string(),
                c.forced_edges.to_string(),
                c.gate_separation.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn run_job(cfg: &RunConfig, data: &Dataset, job: Job, taus: &[f64], out: &Path) -> Result<Vec<CellResult>> {
    let seed = cfg.seed;
    let mut c = cfg.clone();
    let (sbb, mssa) = match job {
        Job::Unet => (false, false),
        Job::SbbOnly => (true, false),
        Job::MssaOnly => (false, true),
        Job::Full => (true, true),
    };
    c.network.search_blocks = sbb;
    c.network.search_aggregation = mssa;
    let searched = match job {
        // Nothing to search: the fixed network derives straight to the template.
        Job::Unet => Network::supernet(&c.network_config(), c.seed)?,
        _ => {
            let dir = out.join(format!("search_{}", job_name(job)));
            info!("seed {seed}: searching {}", job_name(job));
            run_search(&c, data, &dir)?.net
        }
    };
    let gate_separation = searched.gate_separation();
    let tau_list: Vec<f64> = match job {
        Job::Full => taus.to_vec(),
        _ => vec![c.prune.tau],
    };
    let mut cells = Vec::new();
    for tau in tau_list {
        let name = match job {
            Job::Full => full_setting_name(tau),
            _ => job_name(job).to_string(),
        };
        let prune = PruneConfig { tau, ..c.prune };
        let arch = derive(&searched, &prune, &c.hash())?;
        info!("seed {seed}: retraining {name} ({} edges)", arch.edges.len());
        let (_, dice) = run_retrain(&c, &arch, data, &out.join(&name))?;
        info!("seed {seed}: {name} dice {:.4}", dice.mean);
        cells.push(CellResult {
            setting: name,
            seed,
            dice,
            kept_edges: arch.edges.len(),
            forced_edges: arch.edges.iter().filter(|e| e.forced).count(),
            gate_separation,
        });
    }
    Ok(cells)
}

fn job_name(job: Job) -> &'static str {
    match job {
        Job::Unet => UNET,
        Job::SbbOnly => SBB_ONLY,
        Job::MssaOnly => MSSA_ONLY,
        Job::Full => "full",
    }
}

/// Thread count for ablation cells from the environment (default 1).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs the {SBB on/off} × {MSSA on/off} grid plus the τ sweep of the full
/// model for every seed, and writes `ablation.csv`, `ablation.md` and
/// `ablation.json` to `out`.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    cfg.write_resolved(out)?;
    let mut taus = cfg.ablation.taus.clone();
    if !taus.contains(&cfg.prune.tau) {
        taus.push(cfg.prune.tau);
    }
    let jobs: Vec<(u64, Job)> = cfg
        .ablation
        .seeds
        .iter()
        .flat_map(|&s| [Job::Unet, Job::SbbOnly, Job::MssaOnly, Job::Full].map(|j| (s, j)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads_from_env())
        .build()
        .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    let results: Vec<Vec<CellResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, job)| {
                let c = cfg.with_seed(seed);
                run_job(&c, data, job, &taus, &out.join(format!("seed_{seed}")))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let cells: Vec<CellResult> = results.into_iter().flatten().collect();

    let mut settings = vec![
        Setting {
            name: UNET.into(),
            sbb: false,
            mssa: false,
            tau: None,
        },
        Setting {
            name: SBB_ONLY.into(),
            sbb: true,
            mssa: false,
            tau: None,
        },
        Setting {
            name: MSSA_ONLY.into(),
            sbb: false,
            mssa: true,
            tau: Some(cfg.prune.tau),
        },
    ];
    let mut sorted = taus.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    settings.extend(sorted.iter().map(|&t| Setting {
        name: full_setting_name(t),
        sbb: true,
        mssa: true,
        tau: Some(t),
    }));
    let rows = settings
        .into_iter()
        .map(|setting| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.setting == setting.name).collect();
            let dice: Vec<f64> = mine.iter().map(|c| c.dice.mean).collect();
            let (mean, std) = mean_std(&dice);
            let reports: Vec<DiceReport> = mine.iter().map(|c| c.dice.clone()).collect();
            let per_class_mean = DiceReport::average(&reports).map(|r| r.per_class).unwrap_or_default();
            AblationRow {
                median: median(&dice),
                setting,
                dice,
                mean,
                std,
                per_class_mean,
            }
        })
        .collect();
    let report = AblationReport {
        config_hash: cfg.hash(),
        seeds: cfg.ablation.seeds.clone(),
        reference: full_setting_name(cfg.prune.tau),
        rows,
        cells,
    };
    report.write_csv(&out.join("ablation.csv"))?;
    write_text(&out.join("ablation.md"), &report.table())?;
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}
