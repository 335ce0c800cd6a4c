//! `ksr`: mask generation, phantom synthesis, training, evaluation and
//! single-image reconstruction.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime or data failure.
//! `KSR_THREADS` sets the worker count (default 1).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ksr::kspace::{MaskConfig, MaskKind, PhaseAxis};
use ksr::pipeline::{
    self, Command, EvalArgs, EvalSummary, MaskArgs, PlotArgs, ReconArgs, RunConfig, RunManifest, Session, SynthArgs,
    TrainArgs,
};
use ksr::Error;

#[derive(Parser)]
#[command(name = "ksr", version, about = "Accelerated MRI simulation and multimodal T2 reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Center,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Height,
    Width,
}

impl From<Axis> for PhaseAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Height => PhaseAxis::Height,
            Axis::Width => PhaseAxis::Width,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Modality {
    Multimodal,
    Unimodal,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a k-space line mask.
    Mask {
        #[arg(long)]
        lines: usize,
        #[arg(long)]
        factor: f64,
        #[arg(long, value_enum, default_value = "custom")]
        kind: Kind,
        /// Share of kept lines in the central block [default: 1 for center, 0.8 for custom].
        #[arg(long)]
        center_frac: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset of subsampled-T2 / FLAIR / T2 phantom triples.
    Synth {
        #[arg(long)]
        n: usize,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_shape)]
        shape: (usize, usize),
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "width")]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a reconstruction network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "multimodal")]
        model: Modality,
        /// JSON file with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run recorded in --out.
        #[arg(long)]
        resume: bool,
        /// Stop this session after N more epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on a dataset against the zero-filled input.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subsample one raw T2 image and reconstruct it.
    Recon {
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        flair: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "width")]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render history.csv as an SVG loss curve.
    Plot {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the command recorded in a run manifest, writing to --out.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match (p(h)?, p(w)?) {
        (0, _) | (_, 0) => Err(format!("{s:?} has a zero extent")),
        dims => Ok(dims),
    }
}

fn threads() -> Result<usize, Error> {
    match std::env::var("KSR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("KSR_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn build(cmd: Cmd) -> Result<(Command, Session), Error> {
    let session = Session::default();
    let c = match cmd {
        Cmd::Mask {
            lines,
            factor,
            kind,
            center_frac,
            out,
        } => {
            let kind = match kind {
                Kind::Center => MaskKind::Center,
                Kind::Custom => MaskKind::Custom,
            };
            let center_fraction = center_frac.unwrap_or(if kind == MaskKind::Center { 1.0 } else { 0.8 });
            let config = MaskConfig {
                factor,
                center_fraction,
                kind,
            };
            config.validate()?;
            Command::Mask(MaskArgs { lines, config, out })
        }
        Cmd::Synth {
            n,
            shape: (height, width),
            mask,
            seed,
            axis,
            out,
        } => Command::Synth(SynthArgs {
            n,
            height,
            width,
            mask,
            axis: axis.into(),
            seed,
            out,
        }),
        Cmd::Train {
            data,
            model,
            config,
            seed,
            out,
            resume,
            stop_after,
        } => {
            let mut config = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                config.train.seed = s;
            }
            if stop_after == Some(0) {
                return Err(Error::Config("--stop-after must be at least 1".into()));
            }
            let cmd = Command::Train(TrainArgs {
                data,
                multimodal: matches!(model, Modality::Multimodal),
                config,
                out,
            });
            return Ok((cmd, Session { resume, stop_after }));
        }
        Cmd::Eval { data, checkpoint, out } => Command::Eval(EvalArgs { data, checkpoint, out }),
        Cmd::Recon {
            t2,
            flair,
            mask,
            checkpoint,
            axis,
            out,
        } => Command::Recon(ReconArgs {
            t2,
            flair,
            mask,
            checkpoint,
            axis: axis.into(),
            out,
        }),
        Cmd::Plot { history, out } => Command::Plot(PlotArgs { history, out }),
        Cmd::Replay { .. } => unreachable!("handled by the caller"),
    };
    Ok((c, session))
}

fn report(m: &RunManifest) -> Result<(), Error> {
    match &m.command {
        Command::Mask(a) => {
            let mask = pipeline::load_mask(&a.out)?;
            println!(
                "kept {} of {} lines, acceleration {:.4}",
                mask.kept().len(),
                mask.len(),
                mask.acceleration()
            );
        }
        Command::Synth(a) => println!("wrote {} triples to {}", a.n, a.out.display()),
        Command::Train(a) => {
            let text = std::fs::read_to_string(a.out.join(pipeline::HISTORY_FILE)).map_err(|e| Error::Io {
                path: a.out.join(pipeline::HISTORY_FILE),
                source: e,
            })?;
            let records = ksr::train::History::parse_csv(&text)?;
            if let Some(last) = records.last() {
                println!(
                    "epoch {}: train loss {:.6}, val loss {:.6}, val ssim {:.4}",
                    last.epoch, last.train_loss, last.val_loss, last.val_ssim
                );
            }
        }
        Command::Eval(a) => {
            let path = a.out.join("summary.json");
            let text = std::fs::read(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let s: EvalSummary = serde_json::from_slice(&text).map_err(|source| Error::Json { path, source })?;
            println!(
                "{} samples: mean ssim {:.4} (zero-filled {:.4}), mean mse {:.6} (zero-filled {:.6})",
                s.model.count, s.model.mean_ssim, s.zero_filled.mean_ssim, s.model.mean_mse, s.zero_filled.mean_mse
            );
        }
        other => println!("wrote {}", other.output().display()),
    }
    println!("manifest {}", m.command.manifest_path().display());
    Ok(())
}

fn replay(manifest: &Path, out: &Path) -> Result<RunManifest, Error> {
    let original = RunManifest::load(manifest)?.command.output().to_path_buf();
    pipeline::replay(manifest, |p| if p == original { out.to_path_buf() } else { p.to_path_buf() })
}

fn run(cli: Cli) -> Result<(), Error> {
    ksr::par::init_threads(threads()?);
    let manifest = match cli.cmd {
        Cmd::Replay { manifest, out } => replay(&manifest, &out)?,
        cmd => {
            let (c, session) = build(cmd)?;
            pipeline::execute(&c, &session)?
        }
    };
    report(&manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
