//! End-to-end commands: generate a synthetic dataset, train, score, evaluate.
//!
//! Run configuration is TOML. Every section is optional:
//!
//! ```toml
//! flow_source = "auto"          # auto | files | block_matching
//!
//! [synth]                       # gen-synthetic
//! train_clips = 8
//! test_clips = 4
//! frames = 120
//!
//! [model]
//! window = 4
//! patch = 32
//! channels = [32, 64, 128]
//! decoder_channels = [128, 64, 32]
//! fusion = "gated"              # gated | additive | frame_only
//!
//! [train]
//! learning_rate = 2e-4
//! decay = 0.8
//! decay_every = 10
//! batch_size = 128
//! epochs = 60
//! seed = 0
//! weights = { intensity = 1.0, gradient = 1.0, consistency = 1.0, model = 1.0 }
//!
//! [score]
//! w_f = 1.0
//! w_p = 0.01
//! batch_size = 64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    extract_stcs, generate_synthetic, load_split, write_synthetic, DataError, FlowSource, FrameLabel, LoadedClip,
    Split, Stc, SynthConfig,
};
use crate::model::{load_checkpoint, save_checkpoint, Architecture, ModelError, ModelParams};
use crate::scoring::{
    auroc, frame_scores, fuse_score, read_frame_scores, score_stcs, write_frame_scores, write_object_scores,
    ScoreRecord, ScoreWeights, ScoringError,
};
use crate::training::{compute_norm_stats, train, write_loss_log, EpochLog, NormStats, TrainConfig, TrainError};

/// Coarse failure classes, each mapped to a process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            PipelineError::Config(_) | PipelineError::OutputExists(_) | PipelineError::Mismatch(_) => Config,
            PipelineError::Data(DataError::InvalidConfig(_)) => Config,
            PipelineError::Data(_) | PipelineError::Io(..) => Data,
            PipelineError::Model(ModelError::InvalidArchitecture(_)) => Config,
            PipelineError::Model(ModelError::Numerics(_)) => Numerical,
            PipelineError::Model(_) => Data,
            PipelineError::Train(TrainError::InvalidConfig(_)) => Config,
            PipelineError::Train(TrainError::NonFiniteLoss { .. }) => Numerical,
            PipelineError::Train(TrainError::Model(ModelError::Numerics(_))) => Numerical,
            PipelineError::Train(TrainError::Model(ModelError::InvalidArchitecture(_))) => Config,
            PipelineError::Train(_) => Data,
            PipelineError::Scoring(ScoringError::InvalidWeights { .. }) => Config,
            PipelineError::Scoring(ScoringError::NonFinite { .. }) => Numerical,
            PipelineError::Scoring(_) => Data,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(path.display().to_string(), e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub w_f: f64,
    pub w_p: f64,
    pub batch_size: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            w_f: ScoreWeights::PED2.w_f,
            w_p: ScoreWeights::PED2.w_p,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub flow_source: FlowSource,
    pub synth: SynthConfig,
    /// Ignored by `score`, which takes the architecture from the checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Architecture>,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn architecture(&self) -> Architecture {
        self.model.clone().unwrap_or_default()
    }
}

/// `dir/stem.ext` for a sibling of `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub anomalous_frames: usize,
}

pub fn generate(out: &Path, seed: u64, config: &SynthConfig, force: bool) -> Result<GenerateSummary, PipelineError> {
    config.validate()?;
    if out.exists() {
        let nonempty = fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if nonempty && !force {
            return Err(PipelineError::OutputExists(out.to_path_buf()));
        }
        if nonempty {
            for split in [Split::Train, Split::Test] {
                let d = out.join(split.dir_name());
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(io_err(&d))?;
                }
            }
        }
    }
    let ds = generate_synthetic(config, seed)?;
    write_synthetic(out, &ds)?;
    Ok(GenerateSummary {
        train_clips: ds.train.len(),
        test_clips: ds.test.len(),
        frames: ds.train.iter().chain(&ds.test).map(|c| c.clip.len()).sum(),
        anomalous_frames: ds.test.iter().map(|c| c.labels.iter().filter(|&&l| l == 1).count()).sum(),
    })
}

fn cubes(clips: &[LoadedClip], arch: &Architecture) -> Result<Vec<Stc>, PipelineError> {
    let mut out = Vec::new();
    for c in clips {
        out.extend(extract_stcs(&c.clip, &c.boxes, &c.flows, arch.window, arch.patch)?);
    }
    Ok(out)
}

/// Contents of the `<stem>.norm.toml` file written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormFile {
    /// Architecture fingerprint of the checkpoint the stats belong to.
    pub fingerprint: u32,
    pub stats: NormStats,
}

pub struct TrainSummary {
    pub cubes: usize,
    pub log: Vec<EpochLog>,
    pub stats: NormStats,
    pub params: ModelParams,
}

/// Trains on the `train` split and writes the checkpoint, `<stem>.loss.csv`,
/// `<stem>.norm.toml` and the resolved `<stem>.config.toml`.
pub fn run_train(
    data: &Path,
    ckpt: &Path,
    config: &RunConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary, PipelineError> {
    let arch = config.architecture();
    arch.validate()?;
    config.train.validate()?;
    let clips = load_split(data, Split::Train, config.flow_source)?;
    let stcs = cubes(&clips, &arch)?;
    if stcs.is_empty() {
        return Err(DataError::Malformed(format!("{}: no training cubes", data.display())).into());
    }
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let params = ModelParams::init(&arch, config.train.seed)?;
    let train_cfg = TrainConfig {
        checkpoint: None,
        ..config.train.clone()
    };
    let outcome = train(&stcs, params, &train_cfg, on_epoch)?;
    save_checkpoint(&outcome.params, ckpt)?;
    write_loss_log(&sibling(ckpt, "loss.csv"), &outcome.log)?;
    let stats = compute_norm_stats(&outcome.params, &stcs, config.score.batch_size)?;
    let norm = NormFile {
        fingerprint: outcome.params.fingerprint(),
        stats,
    };
    write_text(&sibling(ckpt, "norm.toml"), &toml::to_string(&norm).expect("serializable"))?;
    let resolved = RunConfig {
        model: Some(arch),
        train: TrainConfig {
            checkpoint: Some(ckpt.to_path_buf()),
            ..config.train.clone()
        },
        ..config.clone()
    };
    write_text(&sibling(ckpt, "config.toml"), &resolved.to_toml())?;
    Ok(TrainSummary {
        cubes: stcs.len(),
        log: outcome.log,
        stats,
        params: outcome.params,
    })
}

pub fn load_norm(ckpt: &Path, params: &ModelParams) -> Result<NormStats, PipelineError> {
    let path = sibling(ckpt, "norm.toml");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let norm: NormFile = toml::from_str(&text)
        .map_err(|e| DataError::Malformed(format!("{}: {}", path.display(), e.message())))?;
    if norm.fingerprint != params.fingerprint() {
        return Err(PipelineError::Mismatch(format!(
            "{} was written for architecture {:08x}, checkpoint is {:08x}",
            path.display(),
            norm.fingerprint,
            params.fingerprint()
        )));
    }
    let s = norm.stats;
    if !(s.delta_f > 0.0 && s.delta_p > 0.0) || ![s.u_f, s.u_p, s.delta_f, s.delta_p].iter().all(|v| v.is_finite()) {
        return Err(DataError::Malformed(format!("{}: invalid statistics {s:?}", path.display())).into());
    }
    Ok(s)
}

pub struct ScoreSummary {
    pub objects: usize,
    pub frames: usize,
    pub frame_csv: PathBuf,
    /// `None` when the labels contain a single class.
    pub auroc: Option<f64>,
}

/// Scores the `test` split: per-object rows to `out`, per-frame rows to
/// `<stem>.frames.csv`.
pub fn run_score(
    data: &Path,
    ckpt: &Path,
    out: &Path,
    config: &RunConfig,
    weights: ScoreWeights,
) -> Result<ScoreSummary, PipelineError> {
    weights.validate()?;
    let params = load_checkpoint(ckpt)?;
    if config.model.as_ref().is_some_and(|a| *a != params.arch) {
        log::warn!("ignoring [model] from config; using the checkpoint's architecture");
    }
    let stats = load_norm(ckpt, &params)?;
    let clips = load_split(data, Split::Test, config.flow_source)?;
    let mut records = Vec::new();
    let mut labels: Vec<FrameLabel> = Vec::new();
    for c in &clips {
        let stcs = cubes(std::slice::from_ref(c), &params.arch)?;
        let refs: Vec<&Stc> = stcs.iter().collect();
        let scores = score_stcs(&params, &refs, config.score.batch_size)?;
        for (s, o) in stcs.iter().zip(scores) {
            records.push(ScoreRecord {
                clip: s.clip_id.clone(),
                frame: s.target_frame,
                object_id: Some(s.object_id),
                s_f: o.s_f,
                s_p: o.s_p,
                s_fused: fuse_score(o.s_f, o.s_p, &stats, &weights),
            });
        }
        labels.extend(c.labels.iter().cloned());
    }
    if records.is_empty() {
        return Err(DataError::Malformed(format!(
            "{}: no test cubes (clips shorter than window {}?)",
            data.display(),
            params.arch.window
        ))
        .into());
    }
    let frames = frame_scores(&records, &labels)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_object_scores(out, &records)?;
    let frame_csv = sibling(out, "frames.csv");
    write_frame_scores(&frame_csv, &frames)?;
    let resolved = RunConfig {
        model: Some(params.arch.clone()),
        score: ScoreConfig {
            w_f: weights.w_f,
            w_p: weights.w_p,
            ..config.score.clone()
        },
        ..config.clone()
    };
    write_text(&sibling(out, "config.toml"), &resolved.to_toml())?;
    let scores: Vec<f64> = frames.iter().map(|f| f.score).collect();
    let flags: Vec<u8> = frames.iter().map(|f| f.label).collect();
    Ok(ScoreSummary {
        objects: records.len(),
        frames: frames.len(),
        frame_csv,
        auroc: auroc(&scores, &flags).ok(),
    })
}

/// Frame-level AUROC of a per-frame score file.
pub fn run_eval(scores: &Path) -> Result<f64, PipelineError> {
    let rows = read_frame_scores(scores)?;
    let s: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let l: Vec<u8> = rows.iter().map(|r| r.label).collect();
    Ok(auroc(&s, &l)?)
}
