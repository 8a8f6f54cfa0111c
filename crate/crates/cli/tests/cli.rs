use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use aggnas::aggregation::{DerivedArchitecture, Edge, GatedEdge, GridGeometry, NodeId};
use aggnas::trainer::Checkpoint;

const TINY: &str = r#"{
  "task": {
    "extent": 16,
    "train_samples": 6,
    "val_samples": 2,
    "small_objects": 3,
    "small_radius": [1.0, 1.5],
    "large_radius": [3.0, 4.0]
  },
  "network": { "levels": 3, "base_width": 2 },
  "search": { "epochs": 3, "warmup_epochs": 1, "batch_size": 2 },
  "retrain": { "epochs": 1, "batch_size": 2 }
}"#;

fn aggnas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggnas"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = aggnas(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Temp dir holding `tiny.json` and its generated dataset.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.json", "gen-data"]);
    dir
}

fn searched(extra: &[&str]) -> tempfile::TempDir {
    let dir = workspace();
    let mut args = vec!["--config", "tiny.json"];
    args.extend_from_slice(extra);
    args.push("search");
    ok(dir.path(), &args);
    dir
}

fn graph(path: &Path) -> DerivedArchitecture {
    DerivedArchitecture::load(path).unwrap()
}

fn kept(arch: &DerivedArchitecture) -> BTreeSet<Edge> {
    arch.edges.iter().map(|e| Edge { src: e.src, dst: e.dst }).collect()
}

fn gates(dir: &Path) -> (GridGeometry, Vec<GatedEdge>) {
    let ckpt = Checkpoint::load(&dir.join("runs/search/checkpoint")).unwrap();
    (ckpt.network.config().geometry.clone(), ckpt.network.gates())
}

/// Gate at or above τ, destination still connected to the output.
fn threshold_oracle(geom: &GridGeometry, edges: &[GatedEdge], tau: f64) -> BTreeSet<Edge> {
    let open: Vec<Edge> = edges.iter().filter(|g| g.gate >= tau).map(|g| g.edge).collect();
    let mut reaches: BTreeSet<NodeId> = BTreeSet::from([geom.output()]);
    loop {
        let before = reaches.len();
        for e in &open {
            if reaches.contains(&e.dst) {
                reaches.insert(e.src);
            }
        }
        if reaches.len() == before {
            break;
        }
    }
    open.into_iter().filter(|e| reaches.contains(&e.dst)).collect()
}

#[test]
fn tau_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = aggnas(dir.path(), &["--tau", "1.5", "prune"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prune.tau"));
    let out = aggnas(dir.path(), &["ablate", "--taus", "0.5,1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = aggnas(dir.path(), &["--set", "search.epoch=3", "search"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(aggnas(dir.path(), &["--config", "absent.json", "search"]).status.code(), Some(4));
    assert_eq!(aggnas(dir.path(), &["search"]).status.code(), Some(4));
}

#[test]
fn divergence_is_a_numeric_error() {
    let dir = workspace();
    let out = aggnas(
        dir.path(),
        &["--config", "tiny.json", "--set", "search.weight_optimizer.lr=1e300", "search"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prune_matches_threshold_oracle() {
    let dir = searched(&[]);
    let (geom, edges) = gates(dir.path());
    let mut sorted: Vec<f64> = edges.iter().map(|g| g.gate).collect();
    sorted.sort_by(f64::total_cmp);
    // Thresholds between observed gates, so rounding cannot matter.
    let taus: Vec<f64> = sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])).step_by(4).collect();
    for tau in taus {
        let t = tau.to_string();
        ok(dir.path(), &["--config", "tiny.json", "--tau", &t, "prune", "--no-fallback"]);
        let arch = graph(&dir.path().join("runs/derived/graph.json"));
        assert_eq!(kept(&arch), threshold_oracle(&geom, &edges, tau), "tau {tau}");
        assert!(arch.edges.iter().all(|e| !e.forced));
    }
}

#[test]
fn near_zero_tau_without_fallback_keeps_every_edge() {
    let dir = searched(&[]);
    let (_, edges) = gates(dir.path());
    ok(dir.path(), &["--config", "tiny.json", "--tau", "1e-9", "prune", "--no-fallback"]);
    let arch = graph(&dir.path().join("runs/derived/graph.json"));
    assert_eq!(arch.edges.len(), edges.len());
    assert!(arch.dropped.is_empty());
}

#[test]
fn flags_off_graph_is_the_unet_template() {
    let flags = [
        "--set",
        "network.search_blocks=false",
        "--set",
        "network.search_aggregation=false",
    ];
    let dir = searched(&flags);
    let mut args = vec!["--config", "tiny.json"];
    args.extend_from_slice(&flags);
    args.push("prune");
    ok(dir.path(), &args);
    let arch = graph(&dir.path().join("runs/derived/graph.json"));
    let template: BTreeSet<Edge> = GridGeometry::new(3, 2).unet_edges().into_iter().collect();
    assert_eq!(kept(&arch), template);
    assert!(arch.dropped.is_empty());
}

#[test]
fn same_seed_reruns_give_identical_metrics() {
    let dir = workspace();
    let run = |out: &str| {
        for cmd in ["search", "prune", "retrain"] {
            ok(dir.path(), &["--config", "tiny.json", "--seed", "5", "--out", out, cmd]);
        }
    };
    run("a");
    run("b");
    for file in ["search/metrics.csv", "retrain/metrics.csv", "derived/graph.json", "retrain/dice.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between reruns");
    }
    ok(dir.path(), &["--config", "tiny.json", "--seed", "6", "--out", "c", "search"]);
    let a = fs::read(dir.path().join("a/search/metrics.csv")).unwrap();
    let c = fs::read(dir.path().join("c/search/metrics.csv")).unwrap();
    assert!(a != c, "another seed gives the same metrics");
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let dir = workspace();
    for cmd in ["search", "prune", "retrain"] {
        ok(dir.path(), &["--config", "tiny.json", cmd]);
    }
    ok(dir.path(), &["--config", "tiny.json", "export-dot", "--output", "runs/graph.dot"]);
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/search/config.json")).unwrap()).unwrap();
    let hash = config["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    let mut seen = 0;
    for p in files(&dir.path().join("runs")).into_iter().chain(files(&dir.path().join("data"))) {
        if p.extension().is_some_and(|e| e == "agt") {
            continue;
        }
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(&hash), "{} lacks the config hash", p.display());
        seen += 1;
    }
    assert!(seen >= 12, "only {seen} artifacts");
}

#[test]
fn smoke_config_runs_end_to_end() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let dir = tempfile::tempdir().unwrap();
    let cfg = root.to_str().unwrap();
    let start = Instant::now();
    for cmd in ["gen-data", "search", "prune", "retrain", "eval"] {
        ok(dir.path(), &["--config", cfg, cmd]);
    }
    assert!(start.elapsed() < Duration::from_secs(600));
    let dice: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/smoke/retrain/dice.json")).unwrap()).unwrap();
    let mean = dice["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    let out = ok(dir.path(), &["--config", cfg, "export-dot"]);
    assert!(out.starts_with("digraph"));
}
