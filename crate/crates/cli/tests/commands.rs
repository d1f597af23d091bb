use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::Command;

use plvm::archive::ARCHIVE_HEADER;
use plvm::datagen::{DatasetManifest, DATA_VERSION};
use plvm::evalsuite::EvalReport;
use plvm::recipe::ToyWorldConfig;
use plvm_cli::config::{Overrides, RunConfig};
use plvm_cli::SynthArgs;

fn weights() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../weights/tiny.plvm")
}

const SMALL_WORLD: ToyWorldConfig = ToyWorldConfig {
    identities: 3,
    per_ref: 3,
    heldout_queries: 2,
    seed: 2024,
};

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "[backbone]\nname = \"tiny\"\nweights = {:?}\n\n[data]\nsource = \"toy\"\nidentities = 3\nper_ref = 3\nheldout_queries = 2\nseed = 2024\n\n[train]\nencoder = \"toy-small\"\nsteps = 6\nlr = 0.003\nbatch_size = 2\nw = 20.0\np = 0.6\nk = 16\nseed = 1\nwarmup = 2\ncheckpoint_every = 3\n\n[output]\ndir = \"out\"\n{extra}",
        weights()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_metrics_checkpoints_and_heldout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&write_config(dir.path(), "")).unwrap();
    cfg.apply(&Overrides {
        k: Some(8),
        ..Default::default()
    })
    .unwrap();
    let o = plvm_cli::run_train(&cfg).unwrap();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&o.metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        let keys: Vec<&str> = l.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 6, "{l}");
        for k in ["step", "loss", "lr", "w", "p", "k"] {
            assert!(keys.contains(&k), "{k} missing in {l}");
        }
        assert_eq!(l["step"], i + 1);
        assert_eq!(l["k"], 8);
        assert_eq!(l["w"], 20.0);
    }
    let bytes = std::fs::read(&o.checkpoint).unwrap();
    assert!(bytes.starts_with(ARCHIVE_HEADER.as_bytes()));
    let steps: Vec<String> = std::fs::read_dir(dir.path().join("out/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(steps.len(), 2, "{steps:?}");
    assert!(o.heldout.is_some());
    let engine = plvm_cli::load_engine(&o.checkpoint).unwrap();
    assert_eq!(engine.k(), 8);
}

#[test]
fn toy_synth_train_on_manifest_then_eval_locally() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    plvm_cli::run_toy(&SMALL_WORLD, &d.join("toy")).unwrap();
    let manifest = plvm_cli::run_synth(&SynthArgs {
        refs: d.join("toy/refs"),
        out: d.join("data/manifest.jsonl"),
        per_ref: 3,
        clip_min: 0.2,
        face_min: 0.5,
        seed: 9,
    })
    .unwrap();
    assert_eq!(manifest.header.version, DATA_VERSION);
    assert_eq!(manifest.identities.len(), 3);
    let first = std::fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["version"], DATA_VERSION);
    assert!(header["seed"].is_u64() && header["thresholds"].is_object());
    let reloaded = DatasetManifest::load(&d.join("data/manifest.jsonl")).unwrap();
    assert!(reloaded.to_dataset().identities.iter().all(|i| !i.attributes.is_empty()));

    let cfg_path = write_config(d, "");
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("source = \"toy\"", "source = \"manifest\"\nmanifest = \"data/manifest.jsonl\"");
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let o = plvm_cli::run_train(&cfg).unwrap();
    assert!(o.heldout.is_none());

    let report_path = d.join("report.json");
    let r = plvm_cli::run_eval(&d.join("toy/eval/eval.jsonl"), "local", Some(&o.checkpoint), &report_path).unwrap();
    assert!(r.recognition.is_consistent());
    assert!(r.text_only_accuracy.is_some() && r.visual_accuracy.is_some());
    assert_eq!(EvalReport::load(&report_path).unwrap().recognition, r.recognition);
    assert!(plvm_cli::run_eval(&d.join("toy/eval/eval.jsonl"), "local", None, &report_path).is_err());
    assert!(plvm_cli::run_eval(&d.join("toy/eval/eval.jsonl"), "ftp://x", None, &report_path).is_err());
}

#[test]
fn eval_over_http_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let world = ToyWorldConfig {
        identities: 2,
        heldout_queries: 1,
        ..SMALL_WORLD
    };
    plvm_cli::run_toy(&world, &d.join("toy")).unwrap();
    let cfg = RunConfig::load(&write_config(d, "")).unwrap();
    let ck = plvm_cli::run_train(&cfg).unwrap().checkpoint;
    let set = d.join("toy/eval/eval.jsonl");
    let local = plvm_cli::run_eval(&set, "local", Some(&ck), &d.join("local.json")).unwrap();

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let state = plvm_service::AppState::new(plvm_cli::load_engine(&ck).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.spawn(plvm_service::serve(state, addr));
    let base = format!("http://{addr}");
    for _ in 0..100 {
        if std::net::TcpStream::connect(addr).is_ok() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    let remote = plvm_cli::run_eval(&set, &base, None, &d.join("remote.json")).unwrap();
    assert_eq!(remote.recognition, local.recognition);
    assert_eq!(remote.text_only_accuracy, local.text_only_accuracy);
    // a second run re-registers the same concepts
    plvm_cli::run_eval(&set, &base, None, &d.join("remote2.json")).unwrap();
    rt.shutdown_background();
}

#[test]
fn sweep_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\n[sweep]\nw = [1.0]\nk = [8]\np = []\nencoders = []\n";
    let mut cfg = RunConfig::load(&write_config(dir.path(), extra)).unwrap();
    cfg.train.steps = 2;
    let csv = dir.path().join("sweep.csv");
    let rows = plvm_cli::run_sweep(&cfg, &csv).unwrap();
    assert_eq!(rows.len(), 3, "{rows:?}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("config,pos,neg,mean"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn missing_weights_for_a_named_backbone_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[backbone]\nname = \"llava-7b\"\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let err = format!("{:#}", plvm_cli::run_train(&cfg).unwrap_err());
    assert!(err.contains("PLVM_WEIGHTS_DIR"), "{err}");
}

#[test]
fn binary_parses_overrides_and_reports_errors() {
    let exe = env!("CARGO_BIN_EXE_plvm");
    let out = Command::new(exe).arg("--help").output().unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "synth", "eval", "serve", "sweep"] {
        assert!(help.contains(sub), "{help}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = Command::new(exe)
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--w", "1", "--k", "8", "--p", "0.5", "--encoder", "toy-small", "--steps", "2", "--seed", "3"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!((last["step"].as_u64(), last["w"].as_f64(), last["k"].as_u64()), (Some(2), Some(1.0), Some(8)));
    assert_eq!(last["p"].as_f64(), Some(0.5));

    let out = Command::new(exe).args(["train", "--config", "/nonexistent.toml"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(exe)
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--p", "1.5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
