use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use ndarray::Array3;
use ndarray_npy::NpzWriter;

use omtsam_core::ablation::AblationReport;
use omtsam_core::checkpoint;
use omtsam_core::data::Manifest;
use omtsam_core::train::{dtype_for, StepRecord, LOG_FILE};
use omtsam_core::{ExperimentConfig, OmtSam};

fn omtsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omtsam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Smoke-sized config with a synthetic dataset under `dir/data`.
fn setup(dir: &Path, steps: usize) -> PathBuf {
    let o = omtsam(&["synth-data", "--n", "8", "--size", "32", "--seed", "5", "--out", s(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut cfg = ExperimentConfig::smoke();
    cfg.train.data_root = "data".into();
    cfg.train.runs_dir = "runs".into();
    cfg.train.max_steps = steps;
    cfg.train.epochs = 4;
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn synth_data_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&omtsam(&["synth-data", "--n", "5", "--seed", "9", "--out", s(out)])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
    let manifest = Manifest::load(&a).unwrap();
    assert_eq!(manifest.entries.len(), 10);
    let sample = omtsam_core::data::read_archive(&a.join(&manifest.entries[0].path)).unwrap();
    assert_eq!(sample.image.dim(), (64, 64));
    let o = omtsam(&["synth-data", "--n", "0", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
}

fn write_volume(path: &Path) {
    let voxels = Array3::from_shape_fn((3, 20, 20), |(z, y, x)| (z * 100 + y * 10 + x) as f32 - 200.0);
    let labels = Array3::from_shape_fn((3, 20, 20), |(z, y, x)| u8::from(z > 0 && (3..15).contains(&y) && (4..16).contains(&x)));
    let mut npz = NpzWriter::new(std::fs::File::create(path).unwrap());
    npz.add_array("voxels", &voxels).unwrap();
    npz.add_array("labels", &labels).unwrap();
    npz.finish().unwrap();
}

#[test]
fn prepare_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("volumes");
    std::fs::create_dir(&input).unwrap();
    write_volume(&input.join("case1.npz"));
    let out = dir.path().join("prepared");
    let args = ["prepare-data", "--input", s(&input), "--out", s(&out), "--organs", "liver", "--min-pixels", "10"];
    assert_eq!(code(&omtsam(&args)), 0);
    let first = tree(&out);
    let manifest = Manifest::load(&out).unwrap();
    assert_eq!(manifest.entries.len(), 2);
    assert!(manifest.entries.iter().all(|e| e.organ_name == "liver"));
    assert_eq!(code(&omtsam(&args)), 0);
    assert_eq!(tree(&out), first);
}

#[test]
fn prepare_data_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let missing = dir.path().join("nope");
    assert_eq!(code(&omtsam(&["prepare-data", "--input", s(&missing), "--out", out])), 2);
    assert_eq!(code(&omtsam(&["prepare-data", "--input", out, "--out", out, "--organs", "heart"])), 2);
    assert_eq!(code(&omtsam(&["prepare-data"])), 2);
}

#[test]
fn prepare_data_fails_when_every_volume_fails() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("volumes");
    std::fs::create_dir(&input).unwrap();
    std::fs::write(input.join("broken.npz"), b"not a zip").unwrap();
    let o = omtsam(&["prepare-data", "--input", s(&input), "--out", s(&dir.path().join("o"))]);
    assert_ne!(code(&o), 0);
    write_volume(&input.join("good.npz"));
    let o = omtsam(&["prepare-data", "--input", s(&input), "--out", s(&dir.path().join("o")), "--min-pixels", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_epoch_training_checkpoints_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 0);
    let text = std::fs::read_to_string(&config).unwrap().replace("epochs = 4", "epochs = 0");
    std::fs::write(&config, text).unwrap();
    let o = omtsam(&["train", "--config", s(&config)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("runs/smoke");
    assert!(run.join("config.resolved.toml").is_file());
    let (trained, meta) = checkpoint::load(&run.join("ckpt_0")).unwrap();
    let fresh = OmtSam::new(&meta.config, dtype_for(meta.config.train.precision)).unwrap();
    let (a, b) = (trained.params().tensors(), fresh.params().tensors());
    assert_eq!(a.len(), b.len());
    for (name, t) in &a {
        let diff = (t - &b[name]).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0, "{name}");
    }
}

#[test]
fn seeded_training_reruns_reproduce_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 3);
    let mut logs = Vec::new();
    for ablation in ["no_multiscale", "no_multiscale"] {
        let o = omtsam(&["train", "--config", s(&config), "--ablation", ablation]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let run = dir.path().join("runs/smoke-no_multiscale");
        logs.push(std::fs::read_to_string(run.join(LOG_FILE)).unwrap());
        std::fs::remove_dir_all(run).unwrap();
    }
    assert_eq!(logs[0], logs[1]);
    let records: Vec<StepRecord> = logs[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 1);
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, text.replace("batch_size = 4\n", "")).unwrap();
    let o = omtsam(&["train", "--config", s(&config)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));
    std::fs::write(&config, text.replace("batch_size = 4\n", "batch_size = 4\nbatchsize = 4\n")).unwrap();
    assert_eq!(code(&omtsam(&["train", "--config", s(&config)])), 2);
    assert_eq!(code(&omtsam(&["train", "--config", s(&dir.path().join("absent.toml"))])), 2);
    std::fs::write(&config, text).unwrap();
    assert_eq!(code(&omtsam(&["train", "--config", s(&config), "--ablation", "half"])), 2);
}

#[test]
fn template_parses_and_help_documents_it() {
    let o = omtsam(&["config-template"]);
    assert_eq!(code(&o), 0);
    let cfg = ExperimentConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let help = String::from_utf8(omtsam(&["--help"]).stdout).unwrap();
    assert!(help.contains("[train.prompt_mode_schedule]"), "{help}");
}

#[test]
fn eval_writes_a_report_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 2);
    assert_eq!(code(&omtsam(&["train", "--config", s(&config)])), 0);
    let report = dir.path().join("out/report.json");
    let ckpt = dir.path().join("runs/smoke/ckpt_2");
    let o = omtsam(&["eval", "--ckpt", s(&ckpt), "--split", "test", "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(value["prompt_mode"], "box_text");
    assert!(!value["records"].as_array().unwrap().is_empty());
    assert!(dir.path().join("out/report.config.toml").is_file());
    let o = omtsam(&["eval", "--ckpt", s(&dir.path().join("missing")), "--report", s(&report)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_emits_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 2);
    let out = dir.path().join("ablation");
    let o = omtsam(&["ablate", "--config", s(&config), "--out", s(&out), "--selection", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: AblationReport = serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.selection.is_some() && r.steps == 2));
    let table = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(out.join("config.resolved.toml").is_file());
    for v in ["full", "no_multiscale", "no_text"] {
        assert!(out.join(v).join("ckpt_2").is_dir(), "{v}");
    }
}

#[test]
fn grad_check_exit_codes() {
    let o = omtsam(&["grad-check", "--component", "total_loss"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("total_loss: pass"));
    assert_eq!(code(&omtsam(&["grad-check", "--component", "softmax"])), 2);
    assert_eq!(code(&omtsam(&["grad-check", "--component", "total_loss", "--probes", "0"])), 2);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    stream.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_answers_model_info() {
    let dir = tempfile::tempdir().unwrap();
    let model = OmtSam::new(&ExperimentConfig::smoke(), dtype_for(ExperimentConfig::smoke().train.precision)).unwrap();
    let ckpt = checkpoint::save(&model, dir.path(), 0, None).unwrap();
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_omtsam"))
        .args(["serve", "--ckpt", s(&ckpt), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let response = loop {
        if let Some(r) = get(port, "/v1/model") {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(&model.config().hash()));
}
