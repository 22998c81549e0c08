//! Subcommand implementations. Each returns the process exit code on
//! success paths and a [`CliError`] otherwise.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spvt::gradcheck::{check_all, GradcheckOptions, DEFAULT_STEP, TOLERANCE};
use spvt::prune::{apply_prune_with, PruneOptions, PruneReport};
use spvt::train::{evaluate, sweep, train, SweepArm};
use spvt::vit::{init_params, ParamStore};
use spvt::SparsePosition;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::manifest::{dataset_fingerprint, Artifact, RunManifest};
use crate::report;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
    #[error("{context}")]
    Io { context: String, source: std::io::Error },
    #[error("bad checkpoint {}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Core(#[from] spvt::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use spvt::Error as E;
        match self {
            CliError::Config(ConfigError::Read { .. }) => EXIT_IO,
            CliError::Config(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Io { .. } | CliError::Checkpoint { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Index(_) | E::DegenerateRatio { .. } => EXIT_USAGE,
                E::Io(_) | E::Format(_) => EXIT_IO,
                E::NonFinite(_) | E::Contract(_) => EXIT_CHECK,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "spvt", version, about = "Sparse-regularized ViT training, pruning and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a seeded initialization; writes model.spvt, metrics.csv and manifest.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Global magnitude pruning of a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Fraction of parameters to zero, in (0, 1). Defaults to `prune.ratio`.
        #[arg(long)]
        ratio: Option<f64>,
        /// Pruned checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split accuracy of a checkpoint; appends to results.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory holding results.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Prune-only versus sparse-then-prune over `prune.ratios`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of the penalized loss at every hook position.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        /// Perturbs the analytic gradient at one position (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, out } => cmd_train(&common, &out),
        Command::Prune { common, input, ratio, out } => cmd_prune(&common, &input, ratio, &out),
        Command::Eval { common, input, out } => cmd_eval(&common, &input, &out),
        Command::Sweep { common, out } => cmd_sweep(&common, &out),
        Command::Gradcheck { common, step, inject_fault } => cmd_gradcheck(&common, step, inject_fault.as_deref()),
    }
}

/// Worker cap from `SPVT_THREADS` (default 1).
pub fn threads() -> Result<usize> {
    match std::env::var("SPVT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("SPVT_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<Artifact> {
    report::write(path, bytes).map_err(io(format!("cannot write {}", path.display())))?;
    Ok(Artifact::new(path, bytes))
}

fn csv_bytes(r: csv::Result<Vec<u8>>) -> Result<Vec<u8>> {
    r.map_err(|e| CliError::Io { context: "cannot format CSV".into(), source: std::io::Error::other(e) })
}

fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<Artifact> {
    let bytes = checkpoint::save(store, path)
        .map_err(|source| CliError::Checkpoint { path: path.to_path_buf(), source })?;
    Ok(Artifact::new(path, &bytes))
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, Artifact)> {
    let bytes = std::fs::read(path).map_err(io(format!("cannot read {}", path.display())))?;
    let store = checkpoint::decode(&bytes)
        .map_err(|source| CliError::Checkpoint { path: path.to_path_buf(), source })?;
    Ok((store, Artifact::new(path, &bytes)))
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    manifest.write(path).map_err(io(format!("cannot write {}", path.display())))
}

pub fn cmd_train(common: &Common, out: &Path) -> Result<ExitCode> {
    let config = load_config(common)?;
    let (train_set, test_set) = config.data.load()?;
    let mut manifest = RunManifest::new("train", &config);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&train_set, &test_set));
    let mut params = init_params(&config.model, config.train.seed)?;
    let records = train(&mut params, &config.model, &train_set, &test_set, &config.train)?;
    create_dir(out)?;
    manifest.outputs.push(save_checkpoint(&params, &out.join("model.spvt"))?);
    let metrics = csv_bytes(report::metrics_csv(&records, config.record_time))?;
    manifest.outputs.push(write_file(&out.join("metrics.csv"), &metrics)?);
    let timing = csv_bytes(report::timing_csv(&records))?;
    write_file(&out.join("timing.csv"), &timing)?;
    write_manifest(&manifest, &out.join("manifest.json"))?;
    if let Some(last) = records.last() {
        println!(
            "epochs={} train_acc={} test_acc={} total_loss={}",
            records.len(),
            last.train_acc,
            last.test_acc,
            last.total_loss
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// One JSON-lines record per prune.
#[derive(Debug, Serialize)]
pub struct PruneLine {
    pub ratio: f64,
    pub threshold: f64,
    pub n_total: usize,
    pub n_zeroed: usize,
    pub sparsity: f64,
}

#[derive(Debug, Serialize)]
struct TensorLine<'a> {
    name: &'a str,
    total: usize,
    zeros: usize,
    sparsity: f64,
}

#[derive(Debug, Serialize)]
struct FullReport<'a> {
    #[serde(flatten)]
    summary: &'a PruneLine,
    per_tensor: Vec<TensorLine<'a>>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_prune(common: &Common, input: &Path, ratio: Option<f64>, out: &Path) -> Result<ExitCode> {
    let config = load_config(common)?;
    let ratio = ratio
        .or(config.prune.ratio)
        .ok_or_else(|| CliError::Usage("no pruning ratio: pass --ratio or set prune.ratio".into()))?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CliError::Usage(format!("--ratio must lie in (0, 1), got {ratio}")));
    }
    let (mut store, source) = load_checkpoint(input)?;
    let options = PruneOptions { exclude: config.prune.exclude.clone() };
    let (_, pruned) = apply_prune_with(&mut store, ratio, &options)?;
    let line = prune_line(&pruned, ratio);

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut manifest = RunManifest::new("prune", &config);
    manifest.inputs.push(source);
    manifest.outputs.push(save_checkpoint(&store, out)?);
    let full = FullReport {
        summary: &line,
        per_tensor: pruned
            .per_tensor
            .iter()
            .map(|t| TensorLine { name: &t.name, total: t.total, zeros: t.zeros, sparsity: t.sparsity() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&full).expect("report serializes") + "\n";
    manifest.outputs.push(write_file(&sibling(out, ".report.json"), json.as_bytes())?);
    let record = serde_json::to_string(&line).expect("record serializes");
    let log = out.with_file_name("prune.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(io(format!("cannot open {}", log.display())))?;
    writeln!(f, "{record}").map_err(io(format!("cannot write {}", log.display())))?;
    write_manifest(&manifest, &sibling(out, ".manifest.json"))?;
    println!("{record}");
    Ok(ExitCode::SUCCESS)
}

fn prune_line(report: &PruneReport, ratio: f64) -> PruneLine {
    PruneLine {
        ratio,
        threshold: report.threshold.unwrap_or(0.0),
        n_total: report.n_total,
        n_zeroed: report.n_zeroed,
        sparsity: report.sparsity(),
    }
}

pub fn cmd_eval(common: &Common, input: &Path, out: &Path) -> Result<ExitCode> {
    let config = load_config(common)?;
    let (store, source) = load_checkpoint(input)?;
    store
        .check_against(&config.model)
        .map_err(|e| CliError::Usage(format!("checkpoint does not match the model config: {e}")))?;
    let (train_set, test_set) = config.data.load()?;
    let accuracy = evaluate(&store, &config.model, &test_set)?;
    println!("accuracy={accuracy}");

    create_dir(out)?;
    let results = out.join("results.csv");
    let fresh = !results.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results)
        .map_err(io(format!("cannot open {}", results.display())))?;
    let mut w = csv::Writer::from_writer(file);
    let row = |w: &mut csv::Writer<std::fs::File>, rec: [String; 3]| {
        w.write_record(rec).map_err(|e| CliError::Io {
            context: format!("cannot write {}", results.display()),
            source: std::io::Error::other(e),
        })
    };
    if fresh {
        row(&mut w, ["checkpoint".into(), "checkpoint_hash".into(), "accuracy".into()])?;
    }
    row(&mut w, [input.display().to_string(), source.hash.clone(), report::fmt_f64(accuracy)])?;
    w.flush().map_err(io(format!("cannot write {}", results.display())))?;

    let mut manifest = RunManifest::new("eval", &config);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&train_set, &test_set));
    manifest.inputs.push(source);
    write_manifest(&manifest, &out.join("eval.manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_sweep(common: &Common, out: &Path) -> Result<ExitCode> {
    let config = load_config(common)?;
    let workers = threads()?;
    let (train_set, test_set) = config.data.load()?;
    let init = init_params(&config.model, config.train.seed)?;
    let options = PruneOptions { exclude: config.prune.exclude.clone() };
    let ratios = &config.prune.ratios;
    let arm = |with_sparse: bool| {
        sweep(&init, &config.model, &train_set, &test_set, &config.train, ratios, with_sparse, &options)
    };
    let (baseline, sparse): (spvt::Result<SweepArm>, spvt::Result<SweepArm>) = if workers >= 2 {
        std::thread::scope(|s| {
            let b = s.spawn(|| arm(false));
            let sp = arm(true);
            (b.join().expect("sweep worker panicked"), sp)
        })
    } else {
        (arm(false), arm(true))
    };
    let (baseline, sparse) = (baseline?, sparse?);

    create_dir(out)?;
    let mut manifest = RunManifest::new("sweep", &config);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&train_set, &test_set));
    let table = csv_bytes(report::sweep_csv(&[&baseline, &sparse]))?;
    manifest.outputs.push(write_file(&out.join("sweep.csv"), &table)?);
    let markdown = report::sweep_markdown(&baseline, &sparse);
    manifest.outputs.push(write_file(&out.join("sweep.md"), markdown.as_bytes())?);
    for arm in [&baseline, &sparse] {
        let metrics = csv_bytes(report::metrics_csv(&arm.records, config.record_time))?;
        let name = format!("metrics_{}.csv", report::arm_name(arm));
        manifest.outputs.push(write_file(&out.join(name), &metrics)?);
    }
    write_manifest(&manifest, &out.join("manifest.json"))?;
    print!("{markdown}");
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_gradcheck(common: &Common, step: f64, fault: Option<&str>) -> Result<ExitCode> {
    let config = load_config(common)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(CliError::Usage(format!("--step must be positive, got {step}")));
    }
    let fault = fault
        .map(SparsePosition::from_str)
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = GradcheckOptions { step, seed: config.train.seed, fault, ..GradcheckOptions::default() };
    let started = Instant::now();
    let checks = check_all(&config.model, &opts)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("position={} max_rel_err={:e}", c.position, c.max_rel_err);
        if !c.passed() {
            failed.push(format!("{} ({:e} at {})", c.position, c.max_rel_err, c.worst_param));
        }
    }
    eprintln!("gradcheck finished in {:.1}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Check(format!(
            "relative error >= {TOLERANCE:e} at: {}",
            failed.join(", ")
        )))
    }
}
