//! `furn`: data preparation, training, inference and evaluation.
//!
//! Every command prints a JSON summary on stdout. Failures print
//! `{"error": {"kind": ..., "message": ...}}` on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use furn_core::config::{TrainConfig, Variant};
use furn_core::data::{prepare_dataset, synth_dataset_split, Split};
use furn_core::eval::{evaluate, super_resolve};
use furn_core::train::{latest_checkpoint, train_with};
use furn_core::FurnError;

#[derive(Parser)]
#[command(name = "furn", version, about = "Face super-resolution training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded synthetic face dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        hr_size: usize,
        /// Extra faces assigned to the test split.
        #[arg(long, default_value_t = 0)]
        test_count: usize,
    },
    /// Crop, resize and degrade a folder of face images.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        hr_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        scales: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a generator/discriminator pair.
    Train {
        /// JSON config. Missing fields take full-scale defaults; with no
        /// config at all the desk config is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the latest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Print every loss record to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Super-resolve one image.
    Sr {
        /// Checkpoint directory, or a run directory (its latest checkpoint is used).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint with PSNR/SSIM against the bicubic baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

type CmdResult = Result<Value, FurnError>;

fn resolve_checkpoint(path: &Path) -> Result<PathBuf, FurnError> {
    if path.join("checkpoint.json").exists() {
        return Ok(path.to_path_buf());
    }
    Ok(latest_checkpoint(path)?.unwrap_or_else(|| path.to_path_buf()))
}

fn load_config(path: Option<&Path>, variant: Option<&str>, seed: Option<u64>, steps: Option<u64>) -> Result<TrainConfig, FurnError> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(v) = variant {
        cfg = cfg.with_variant(v.parse::<Variant>()?);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), FurnError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| FurnError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| FurnError::Io(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Synth { out, count, seed, hr_size, test_count } => {
            let m = synth_dataset_split(count, test_count, hr_size, seed, &out)?;
            Ok(json!({
                "out": out,
                "train": m.count(Split::Train),
                "test": m.count(Split::Test),
                "hr_size": m.hr_size,
            }))
        }
        Command::Prepare { input, output, hr_size, scales, test_fraction, seed } => {
            let p = prepare_dataset(&input, &output, hr_size, &scales, test_fraction, seed)?;
            Ok(json!({
                "output": output,
                "train": p.manifest.count(Split::Train),
                "test": p.manifest.count(Split::Test),
                "lr_dirs": p.lr_dirs.iter().map(|(s, d)| json!({"scale": s, "dir": d})).collect::<Vec<_>>(),
            }))
        }
        Command::Train { config, data, out, variant, seed, steps, resume, verbose } => {
            let cfg = load_config(config.as_deref(), variant.as_deref(), seed, steps)?;
            let every = cfg.checkpoint_every;
            let outcome = train_with(&cfg, &data, &out, resume, |r| {
                if verbose || r.step % every == 0 {
                    eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
                }
            })?;
            Ok(json!({
                "variant": cfg.variant,
                "steps": outcome.steps,
                "config_hash": outcome.config_hash,
                "param_hash": outcome.param_hash,
                "checkpoints": outcome.checkpoints,
                "last": outcome.records.last(),
            }))
        }
        Command::Sr { checkpoint, input, output } => {
            let (h, w) = super_resolve(&resolve_checkpoint(&checkpoint)?, &input, &output)?;
            Ok(json!({"output": output, "height": h, "width": w}))
        }
        Command::Eval { checkpoint, data, report, split } => {
            let split: Split = split.parse()?;
            let r = evaluate(&resolve_checkpoint(&checkpoint)?, &data, split)?;
            write_file(&report, &r.to_json()?)?;
            Ok(json!({
                "report": report,
                "variant": r.variant,
                "count": r.count,
                "model": r.model,
                "bicubic": r.bicubic,
            }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("UsageError", e.to_string().trim().to_string()),
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
