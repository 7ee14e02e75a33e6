//! `dssinet`: ground truth, DMS-SSIM, training, evaluation and checkpoint
//! inspection from the command line. Results go to stdout as one JSON
//! document; diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dssinet_core::density::{self, SigmaConfig};
use dssinet_core::dms_ssim::dms_ssim_loss;
use dssinet_core::model::{self, config_hash};
use dssinet_core::train::{self, load_dataset};
use dssinet_core::{DmsSsimConfig, Error, TrainConfig};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

/// Directory searched for `train.json` and `dms_ssim.json` when `--config` is absent.
const CONFIG_DIR_VAR: &str = "DSSINET_CONFIG_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "dssinet",
    version,
    about = "Density-map crowd counting toolkit"
)]
struct Cli {
    /// Worker threads; 1 gives the deterministic serial mode.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Repeat for more logging on stderr (RUST_LOG overrides).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a ground-truth density map from point annotations.
    GenGt {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Neighbours averaged for each adaptive spread.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Spread as a fraction of the mean neighbour distance.
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
    },
    /// DMS-SSIM between two maps.
    Ssim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// DMS-SSIM configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on synthetic scenes.
    Train {
        /// Training configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of `<name>.json` + `<name>.dmp` pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// List the tensors of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match run(cli) {
        Ok(out) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("JSON values serialize")
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<Value, Failure> {
    let threads = cli.threads.ok_or_else(|| {
        Failure::usage("--threads is required (use 1 for deterministic serial runs)")
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads as usize)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot start {threads} threads: {e}")))?;

    match cli.command {
        Command::GenGt {
            annotations,
            out,
            k,
            beta,
        } => gen_gt(&annotations, &out, k, beta),
        Command::Ssim { a, b, config } => ssim(&a, &b, config),
        Command::Train { config } => run_train(config),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn gen_gt(annotations: &Path, out: &Path, k: usize, beta: f64) -> Result<Value, Failure> {
    if k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Failure::usage("--beta must be positive"));
    }
    let ann = density::read_annotations(annotations)?;
    let cfg = SigmaConfig {
        k,
        beta,
        ..SigmaConfig::default()
    };
    let gt = density::ground_truth(&ann, &cfg)?;
    density::write_density(out, &gt.map)?;
    if gt.skipped > 0 {
        log::warn!(
            "{} annotation(s) fall outside the canvas and were skipped",
            gt.skipped
        );
    }
    Ok(json!({
        "count": ann.len(),
        "integral": gt.map.integral(),
        "skipped_points": gt.skipped,
    }))
}

/// `--config` if given, else `<name>` in the config directory if that exists.
fn config_path(explicit: Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit.or_else(|| {
        let dir = std::env::var_os(CONFIG_DIR_VAR)?;
        let p = Path::new(&dir).join(name);
        p.exists().then_some(p)
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn ssim(a: &Path, b: &Path, config: Option<PathBuf>) -> Result<Value, Failure> {
    let cfg: DmsSsimConfig = match config_path(config, "dms_ssim.json") {
        Some(p) => read_json(&p)?,
        None => DmsSsimConfig::default(),
    };
    cfg.validate()?;
    let x = density::read_map(a)?;
    let y = density::read_map(b)?;
    let out = dms_ssim_loss(&x, &y, &cfg)?;
    Ok(json!({
        "dms_ssim": out.dms_ssim,
        "loss": out.loss,
        "per_scale": out.per_scale,
    }))
}

fn run_train(config: Option<PathBuf>) -> Result<Value, Failure> {
    let path = config_path(config, "train.json").ok_or_else(|| {
        Failure::usage(format!(
            "no --config given and {CONFIG_DIR_VAR} holds no train.json"
        ))
    })?;
    let cfg: TrainConfig = read_json(&path)?;
    let outcome = train::train(&cfg)?;
    let losses = train::step_losses(&outcome.log);
    Ok(json!({
        "steps": losses.len(),
        "final_loss": losses.last(),
        "best_val_mae": outcome.best_val_mae,
        "baseline_mae": outcome.baseline.as_ref().map(|b| b.mae),
        "final_checkpoint": outcome.final_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
        "log": outcome.log_path,
    }))
}

fn eval(checkpoint: &Path, data: &Path) -> Result<Value, Failure> {
    let (params, _) = model::load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("{}: no <name>.json annotation files found", data.display()),
        });
    }
    let report = train::evaluate(&params, &dataset)?;
    Ok(json!({ "mae": report.mae, "mse": report.mse, "n": report.len() }))
}

fn inspect(checkpoint: &Path) -> Result<Value, Failure> {
    let (params, dms) = model::load_checkpoint(checkpoint)?;
    let tensors: Vec<Value> = params
        .iter()
        .map(|(name, t)| json!({ "name": name, "shape": t.shape(), "norm": t.l2_norm() }))
        .collect();
    Ok(json!({
        "config_hash": config_hash(params.config(), &dms)?,
        "model": params.config(),
        "dms_ssim": dms,
        "num_tensors": params.len(),
        "num_scalars": params.num_scalars(),
        "tensors": tensors,
    }))
}
