use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vidanom_core::model::FusionMode;
use vidanom_core::pipeline::{self, PipelineError, RunConfig};
use vidanom_core::scoring::ScoreWeights;

/// Appearance/motion consistency anomaly detection on object-centric video
/// cubes.
#[derive(Parser)]
#[command(name = "vidanom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Gated,
    Additive,
    FrameOnly,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Gated => FusionMode::Gated,
            Fusion::Additive => FusionMode::Additive,
            Fusion::FrameOnly => FusionMode::FrameOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of bouncing sprites with labelled anomalies.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        train_clips: Option<usize>,
        #[arg(long)]
        test_clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on the train split; writes the checkpoint plus loss log,
    /// normalization statistics and resolved config beside it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        fusion: Option<Fusion>,
    },
    /// Score the test split; writes per-object and per-frame CSVs.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        wf: Option<f64>,
        #[arg(long)]
        wp: Option<f64>,
    },
    /// Print the frame-level AUROC of a per-frame score CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    path.map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenSynthetic {
            out,
            seed,
            train_clips,
            test_clips,
            frames,
            force,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?.synth;
            cfg.train_clips = train_clips.unwrap_or(cfg.train_clips);
            cfg.test_clips = test_clips.unwrap_or(cfg.test_clips);
            cfg.frames = frames.unwrap_or(cfg.frames);
            let s = pipeline::generate(&out, seed, &cfg, force)?;
            println!(
                "wrote {}: {} train clips, {} test clips, {} frames, {} anomalous test frames",
                out.display(),
                s.train_clips,
                s.test_clips,
                s.frames,
                s.anomalous_frames
            );
        }
        Command::Train {
            data,
            out,
            config,
            seed,
            epochs,
            batch_size,
            lr,
            fusion,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let t = &mut cfg.train;
            t.seed = seed.unwrap_or(t.seed);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            if let Some(f) = fusion {
                cfg.model = Some(cfg.architecture().with_fusion(f.into()));
            }
            let s = pipeline::run_train(&data, &out, &cfg, |e| {
                log::info!("epoch {} total {:.6} lr {:e}", e.epoch, e.total, e.lr);
            })?;
            let last = s.log.last().expect("at least one epoch");
            println!(
                "trained on {} cubes for {} epochs: final loss {:.6}; wrote {}",
                s.cubes,
                s.log.len(),
                last.total,
                out.display()
            );
        }
        Command::Score {
            data,
            ckpt,
            out,
            config,
            wf,
            wp,
        } => {
            let cfg = load_config(config.as_deref())?;
            let weights = ScoreWeights {
                w_f: wf.unwrap_or(cfg.score.w_f),
                w_p: wp.unwrap_or(cfg.score.w_p),
            };
            let s = pipeline::run_score(&data, &ckpt, &out, &cfg, weights)?;
            println!(
                "scored {} objects over {} frames; wrote {} and {}",
                s.objects,
                s.frames,
                out.display(),
                s.frame_csv.display()
            );
        }
        Command::Eval { scores } => {
            let a = pipeline::run_eval(&scores)?;
            println!("auroc {a:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", kind.tag());
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
