//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{bench_memory, bench_sampling, stream_epoch, StreamMode};
use crate::error::{Error, Result};
use crate::granule_io::{generate_synthetic_dataset, read_granule, read_labels, DatasetManifest, SynthConfig};
use crate::inference::{infer_scene, score_map, write_map, write_pgm, DEFAULT_BOUNDARY_THRESHOLD, DEFAULT_INFER_BATCH};
use crate::model3d::checkpoint::{describe, load_checkpoint, read_tensors};
use crate::model3d::ModelConfig;
use crate::patch_index::{build_index, write_index};
use crate::preprocess::{preprocess_manifest, preprocess_pipeline, Fallback, PreprocessConfig};
use crate::training::{evaluate, train, AdamConfig, LossConfig, TrainConfig};

pub const THREADS_ENV: &str = "DUSTPIPE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dustpipe", version, about = "Dust detection on multispectral granules with a 3D CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with planted dust plumes.
    Synth(SynthArgs),
    /// Normalize and impute every granule of a manifest.
    Preprocess(PreprocessArgs),
    /// Split a manifest into train / validation / test manifests.
    Split(SplitArgs),
    /// Patch-center index operations.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Train the network.
    Train(TrainArgs),
    /// Score a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Produce a detection map for one scene.
    Infer(InferArgs),
    /// Memory and sampling benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Checkpoint inspection.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 38)]
    pub channels: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
    #[arg(long, default_value_t = 0.05)]
    pub nan_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_nan_fraction: f64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows searched above and below a missing value.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Fill for bands with no finite value: band-mean or zero.
    #[arg(long, default_value = "band-mean")]
    pub fallback: Fallback,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub train: usize,
    #[arg(long)]
    pub val: usize,
    /// Directory receiving train.json, val.json and test.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build and write the patch-center index of a manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        patch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest_train: PathBuf,
    #[arg(long)]
    pub manifest_val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub passes: usize,
    #[arg(long, default_value_t = 5)]
    pub partitions: usize,
    #[arg(long, default_value_t = 3)]
    pub sub_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub wd: f64,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub patch_size: usize,
    /// Filters of the three blocks, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128])]
    pub filters: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest_test: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub granule: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Normalize and impute the granule before inference.
    #[arg(long)]
    pub preprocess: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_INFER_BATCH)]
    pub batch: usize,
    /// Label map to score the detection map against.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Where to write the score report (printed when omitted).
    #[arg(long, requires = "labels")]
    pub score: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_THRESHOLD)]
    pub boundary_threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Peak resident memory of mmap versus full-load streaming.
    Memory {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        large: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Indexed versus mask-scan sampling throughput.
    Sampling {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Stream one epoch and print stats as JSON (used by `bench memory`).
    #[command(hide = true)]
    Stream {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        patch_size: usize,
        #[arg(long, default_value = "mmap")]
        mode: StreamMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// List checkpoint tensors and parameter groups.
    Describe { ckpt: PathBuf },
}

/// Caps the global worker pool from `DUSTPIPE_THREADS` (0 or unset = auto).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::io_at(p, e)),
        None => writeln!(out, "{text}").map_err(Error::Io),
    }
}

fn say(out: &mut dyn Write, msg: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{msg}").map_err(Error::Io)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                count: a.count,
                height: a.height,
                width: a.width,
                channels: a.channels,
                noise_sigma: a.noise,
                nan_fraction: a.nan_fraction,
                label_nan_fraction: a.label_nan_fraction,
                ..SynthConfig::default()
            };
            let m = generate_synthetic_dataset(&a.out, &cfg)?;
            say(out, format!("wrote {} granules to {}", m.len(), a.out.display()))
        }
        Command::Preprocess(a) => {
            let m = DatasetManifest::load(&a.manifest)?;
            let cfg = PreprocessConfig {
                impute_window: a.window,
                rng_seed: a.seed,
                fallback: a.fallback,
            };
            let done = preprocess_manifest(&m, &a.out, &cfg)?;
            say(out, format!("preprocessed {} granules into {}", done.len(), a.out.display()))
        }
        Command::Split(a) => {
            let m = DatasetManifest::load(&a.manifest)?;
            let (train, val, test) = m.split(a.train, a.val)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io_at(&a.out, e))?;
            for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
                part.save(a.out.join(format!("{name}.json")))?;
            }
            say(
                out,
                format!("split {} granules: {} train, {} val, {} test", m.len(), train.len(), val.len(), test.len()),
            )
        }
        Command::Index {
            command: IndexCommand::Build {
                manifest,
                patch_size,
                out: path,
            },
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let index = build_index(&m, patch_size)?;
            write_index(&index, &path)?;
            say(out, format!("{} patch centers written to {}", index.len(), path.display()))
        }
        Command::Train(a) => {
            let filters: [usize; 3] = a
                .filters
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config("--filters takes exactly three counts".into()))?;
            let cfg = TrainConfig {
                lr: a.lr,
                adam: AdamConfig {
                    weight_decay: a.wd,
                    ..AdamConfig::default()
                },
                patience: a.patience,
                passes: a.passes,
                partitions: a.partitions,
                sub_epochs: a.sub_epochs,
                batch_size: a.batch,
                seed: a.seed,
                filters,
                ..TrainConfig::default()
            };
            let train_m = DatasetManifest::load(&a.manifest_train)?;
            let val_m = DatasetManifest::load(&a.manifest_val)?;
            let art = train(&train_m, &val_m, &a.out, a.patch_size, &cfg, &LossConfig { alpha: a.alpha })?;
            let last = art.outcome.log.last().expect("non-empty log");
            say(
                out,
                format!(
                    "{} steps; final val wmse {:.6}, best {:.6}; checkpoints in {}",
                    art.outcome.steps,
                    last.val_wmse,
                    art.outcome.best_val_wmse,
                    a.out.display()
                ),
            )
        }
        Command::Eval(a) => {
            let m = DatasetManifest::load(&a.manifest_test)?;
            let report = evaluate(&a.ckpt, &m, &LossConfig { alpha: a.alpha }, a.batch)?;
            emit_json(&report, a.report.as_deref(), out)
        }
        Command::Infer(a) => {
            let model = load_checkpoint(&a.ckpt)?.model;
            let mut g = read_granule(&a.granule)?;
            if a.preprocess {
                g = preprocess_pipeline(
                    g,
                    &PreprocessConfig {
                        rng_seed: a.seed,
                        ..PreprocessConfig::default()
                    },
                )?;
            }
            let map = infer_scene(&model, &g, a.batch)?;
            write_map(&map, &a.out)?;
            if let Some(p) = &a.pgm {
                write_pgm(&map, p)?;
            }
            match &a.labels {
                Some(l) => {
                    let labels = read_labels(l)?.normalized();
                    let report = score_map(&map, &labels, &LossConfig { alpha: a.alpha }, a.boundary_threshold)?;
                    emit_json(&report, a.score.as_deref(), out)
                }
                None => say(out, format!("wrote {}x{} map to {}", map.height, map.width, a.out.display())),
            }
        }
        Command::Bench { command } => match command {
            BenchCommand::Memory {
                small,
                large,
                batch,
                patch_size,
                seed,
                report,
            } => {
                let exe = std::env::current_exe().map_err(Error::Io)?;
                let r = bench_memory(&exe, &small, &large, batch, patch_size, seed)?;
                emit_json(&r, report.as_deref(), out)?;
                if r.partial {
                    say(out, r.notice.as_deref().unwrap_or("partial report"))?;
                }
                if !r.passed() {
                    return Err(Error::Config("memory assertions failed; see report".into()));
                }
                Ok(())
            }
            BenchCommand::Sampling {
                manifest,
                batch,
                seconds,
                patch_size,
                seed,
                report,
            } => {
                let m = DatasetManifest::load(&manifest)?;
                let duration = Duration::try_from_secs_f64(seconds)
                    .map_err(|_| Error::Config(format!("invalid duration {seconds}")))?;
                let r = bench_sampling(&m, batch, patch_size, seed, duration)?;
                emit_json(&r, report.as_deref(), out)
            }
            BenchCommand::Stream {
                manifest,
                batch,
                patch_size,
                mode,
                seed,
            } => {
                let m = DatasetManifest::load(&manifest)?;
                let s = stream_epoch(&m, batch, patch_size, mode, seed)?;
                say(out, serde_json::to_string(&s)?)
            }
        },
        Command::Model {
            command: ModelCommand::Describe { ckpt },
        } => {
            let records = read_tensors(&ckpt)?;
            let model = load_checkpoint(&ckpt)?.model;
            let ModelConfig {
                channels, patch_size, ..
            } = model.config;
            write!(out, "{}", describe(&records)).map_err(Error::Io)?;
            say(out, format!("input: {channels} channels, {patch_size}x{patch_size} patches"))?;
            for e in model.config.shape_ledger() {
                let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
                say(out, format!("  {:<8} {}", e.layer, dims.join(" x ")))?;
            }
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 on usage errors and 1 on
/// any other failure, with a one-line diagnostic on `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    if let Err(e) = configure_threads().and_then(|_| execute(cli.command, out)) {
        let _ = writeln!(err, "dustpipe: {e}");
        return 1;
    }
    0
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
