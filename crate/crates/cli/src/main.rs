//! `omtsam`: data preparation, training, evaluation, ablation, gradient
//! checks and serving from one entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omtsam_core::ablation::run_ablation;
use omtsam_core::checkpoint;
use omtsam_core::data::{
    organ_id, organ_name, prepare_dataset, synth_dataset, synth_images, Manifest, PrepareOptions, Split,
    SplitFractions, Window, SHAPES,
};
use omtsam_core::eval::evaluate;
use omtsam_core::gradcheck::{grad_check, Component, DEFAULT_PROBES, DEFAULT_TOLERANCE};
use omtsam_core::train::{dtype_for, fit, PromptMode};
use omtsam_core::{Ablation, ExperimentConfig, OmtSam};
use omtsam_service::{router, AppState, LoadedModel};

const SNAPSHOT: &str = "config.resolved.toml";

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<omtsam_core::Error> for Failure {
    fn from(e: omtsam_core::Error) -> Self {
        use omtsam_core::Error as E;
        match e {
            E::Config(_) | E::Validation { .. } => Failure::usage(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "omtsam", version, about = "Promptable segmentation with image-text prompt fusion")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> String {
    format!(
        "CONFIG FILE\n\nEvery command that takes --config reads one TOML file. All keys are required and \
         unknown keys are rejected. Relative paths are resolved against the file's directory. \
         The defaults are:\n\n{}",
        ExperimentConfig::template()
    )
}

#[derive(Subcommand)]
enum Command {
    /// Window, slice and archive labeled volumes (`*.npz` with `voxels` and `labels`).
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated organ names or label values.
        #[arg(long, value_delimiter = ',', default_value = "liver,kidney,spleen,pancreas")]
        organs: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        min_pixels: usize,
        #[arg(long, default_value_t = -200.0, allow_hyphen_values = true)]
        window_lo: f32,
        #[arg(long, default_value_t = 300.0, allow_hyphen_values = true)]
        window_hi: f32,
    },
    /// Generate the two-shape synthetic dataset.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the configured dataset's train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Score a checkpoint on one split and write the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        /// Dataset root; defaults to the checkpoint's `train.data_root`.
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value = "box_text")]
        prompt_mode: PromptMode,
    },
    /// Train and score the full, no_multiscale and no_text variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        prompt_mode: PromptMode,
        /// Held-out two-shape images for text-selection scores (synthetic data only; 0 disables).
        #[arg(long, default_value_t = 32)]
        selection: usize,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Service settings; defaults to the checkpoint's own config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Finite-difference gradient check of one component in f64.
    GradCheck {
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a complete config file with the default values.
    ConfigTemplate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData {
            input,
            out,
            organs,
            seed,
            min_pixels,
            window_lo,
            window_hi,
        } => prepare(&input, &out, &organs, seed, min_pixels, Window { lo: window_lo, hi: window_hi }),
        Command::SynthData { n, size, seed, out } => synth(n, size, seed, &out),
        Command::Train { config, ablation } => train(&config, ablation),
        Command::Eval {
            ckpt,
            split,
            report,
            data_root,
            prompt_mode,
        } => eval(&ckpt, split, &report, data_root.as_deref(), prompt_mode),
        Command::Ablate {
            config,
            out,
            prompt_mode,
            selection,
        } => ablate(&config, &out, prompt_mode, selection),
        Command::Serve { ckpt, config, host, port } => serve(ckpt.as_deref(), config.as_deref(), host, port),
        Command::GradCheck {
            component,
            probes,
            tolerance,
            seed,
        } => gradcheck(&component, probes, tolerance, seed),
        Command::ConfigTemplate => {
            print!("{}", ExperimentConfig::template());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Outcome {
    write_file(&dir.join(SNAPSHOT), cfg.to_toml().as_bytes())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    serde_json::to_vec_pretty(value).map_err(|e| Failure::runtime(e.to_string()))
}

/// Loads a config and makes its relative paths absolute against the file's directory.
fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::usage(e.to_string()))?;
    let base = path
        .canonicalize()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    cfg.train.data_root = resolve(&cfg.train.data_root);
    cfg.train.runs_dir = resolve(&cfg.train.runs_dir);
    cfg.service.datasets = cfg.service.datasets.iter().map(|(k, v)| (k.clone(), resolve(v))).collect();
    Ok(cfg)
}

fn parse_organ(s: &str) -> Result<u8, Failure> {
    let s = s.trim();
    if let Some(id) = organ_id(s) {
        return Ok(id);
    }
    s.parse::<u8>()
        .ok()
        .filter(|id| organ_name(*id).is_some())
        .ok_or_else(|| Failure::usage(format!("unknown organ `{s}`")))
}

fn prepare(input: &Path, out: &Path, organs: &[String], seed: u64, min_pixels: usize, window: Window) -> Outcome {
    if std::fs::read_dir(input).is_err() {
        return Err(Failure::usage(format!("cannot read input directory {}", input.display())));
    }
    let opts = PrepareOptions {
        organs: organs.iter().map(|o| parse_organ(o)).collect::<Result<_, _>>()?,
        window,
        min_pixels,
        seed,
        fractions: SplitFractions::default(),
    };
    let manifest = prepare_dataset(input, out, &opts)?;
    println!("{} slices written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Outcome {
    let manifest = synth_dataset(n, size, seed, SplitFractions::default(), out)?;
    println!("{} samples from {n} images written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn train_samples(cfg: &ExperimentConfig, split: Split) -> Result<Vec<omtsam_core::data::SliceSample>, Failure> {
    let root = &cfg.train.data_root;
    let manifest = Manifest::load(root).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(manifest.load_samples(root, split)?)
}

fn train(config: &Path, ablation: Option<Ablation>) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(a) = ablation {
        cfg.train.ablation = a;
        cfg.name = format!("{}-{a}", cfg.name);
    }
    let samples = train_samples(&cfg, Split::Train)?;
    let run_dir = cfg.train.runs_dir.join(&cfg.name);
    write_snapshot(&run_dir, &cfg)?;
    let model = OmtSam::new(&cfg, dtype_for(cfg.train.precision))?;
    let report = fit(&model, &samples, &cfg.train, &cfg.loss, Some(&run_dir))?;
    let last = report.records.last().map_or("n/a".to_string(), |r| format!("{:.6}", r.loss));
    println!("{} steps, final loss {last}", report.steps());
    if let Some(ckpt) = report.checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn eval(ckpt: &Path, split: Split, report: &Path, data_root: Option<&Path>, mode: PromptMode) -> Outcome {
    let (model, meta) = checkpoint::load(ckpt).map_err(|e| Failure::usage(e.to_string()))?;
    let mut cfg = meta.config.clone();
    if let Some(root) = data_root {
        cfg.train.data_root = root.to_path_buf();
    }
    let samples = train_samples(&cfg, split)?;
    if samples.is_empty() {
        return Err(Failure::usage(format!("split `{split}` is empty")));
    }
    let result = evaluate(&model, &samples, mode, &cfg.metrics)?;
    write_file(report, &to_json(&result)?)?;
    let snapshot = report.with_extension("config.toml");
    write_file(&snapshot, cfg.to_toml().as_bytes())?;
    let o = &result.overall;
    println!(
        "{} samples ({} excluded): mean DSC {}",
        o.count,
        o.excluded,
        o.dsc.map_or("n/a".into(), |s| format!("{:.4}", s.mean))
    );
    Ok(())
}

fn ablate(config: &Path, out: &Path, mode: PromptMode, selection: usize) -> Outcome {
    let cfg = load_config(config)?;
    let root = &cfg.train.data_root;
    let manifest = Manifest::load(root).map_err(|e| Failure::usage(e.to_string()))?;
    let train = manifest.load_samples(root, Split::Train)?;
    let test = manifest.load_samples(root, Split::Test)?;
    if test.is_empty() {
        return Err(Failure::usage("the test split is empty"));
    }
    let synthetic = manifest.entries.iter().all(|e| SHAPES.iter().any(|s| s.name() == e.organ_name));
    let held_out = if selection > 0 && synthetic {
        // A different generator seed gives images disjoint from the dataset's.
        Some(synth_images(selection, test[0].image.nrows(), manifest.seed.wrapping_add(1))?)
    } else {
        None
    };
    write_snapshot(out, &cfg)?;
    let report = run_ablation(&cfg, &Ablation::ALL, &train, &test, held_out.as_deref(), mode, Some(out))?;
    write_file(&out.join("ablation.json"), &to_json(&report)?)?;
    let table = report.to_markdown();
    write_file(&out.join("ablation.md"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn serve(ckpt: Option<&Path>, config: Option<&Path>, host: Option<String>, port: Option<u16>) -> Outcome {
    let loaded = match ckpt {
        Some(dir) => Some(LoadedModel::load(dir).map_err(|e| Failure::usage(e.to_string()))?),
        None => None,
    };
    let mut service = match (config, &loaded) {
        (Some(path), _) => load_config(path)?.service,
        (None, Some(l)) => l.meta.config.service.clone(),
        (None, None) => return Err(Failure::usage("give --ckpt, --config or both")),
    };
    if let Some(h) = host {
        service.host = h;
    }
    if let Some(p) = port {
        service.port = p;
    }
    let addr: SocketAddr = format!("{}:{}", service.host, service.port)
        .parse()
        .map_err(|e| Failure::usage(format!("bad listen address: {e}")))?;
    let datasets: BTreeMap<_, _> = AppState::open_datasets(&service.datasets)?;
    let app = router(AppState::new(loaded, datasets, service.allow_reload), &service.cors_origins);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    runtime
        .block_on(omtsam_service::serve(app, addr))
        .map_err(|e| Failure::runtime(format!("{addr}: {e}")))
}

fn gradcheck(component: &str, probes: usize, tolerance: f64, seed: u64) -> Outcome {
    let component: Component = component.parse()?;
    if probes == 0 {
        return Err(Failure::usage("--probes must be positive"));
    }
    let report = grad_check(component, probes, tolerance, seed)?;
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::runtime(format!("{} gradient check failed", component)))
    }
}
