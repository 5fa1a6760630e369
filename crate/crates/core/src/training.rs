//! Adam training loop, learning-rate schedule, and the normal-data
//! statistics used to standardize test scores.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Stc;
use crate::losses::{total_loss, LossWeights};
use crate::model::{forward, save_checkpoint, ModelError, ModelParams, ParamKind, StcBatch};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scoring::score_stcs;

pub const LOSS_LOG_HEADER: &str = "epoch,l_int,l_gd,l_sim,l_reg,total,lr";

/// Lower bound applied to both standard deviations.
pub const DELTA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (first cube: clip {clip} frame {frame})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        clip: String,
        frame: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied at the start of every `decay_every`-th epoch.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    /// Seeds parameter init and batch shuffling.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            decay: 0.8,
            decay_every: 10,
            batch_size: 128,
            epochs: 60,
            weights: LossWeights::PED2_AVENUE,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn ped2() -> Self {
        Self::default()
    }

    pub fn avenue() -> Self {
        Self {
            epochs: 40,
            ..Self::default()
        }
    }

    pub fn shanghaitech() -> Self {
        Self {
            batch_size: 256,
            epochs: 40,
            weights: LossWeights::SHANGHAITECH,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return bad(format!("decay {} must be > 0", self.decay));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("decay_every, batch_size and epochs must be >= 1".into());
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)
    }

    /// Rate used throughout 0-indexed epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (i, ((_, p), g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Mean loss terms over one epoch, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_int: f64,
    pub l_gd: f64,
    pub l_sim: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub l_int: f64,
    pub l_gd: f64,
    pub l_sim: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Evaluates the objective on one batch; with `want_grads`, also returns
/// gradients for every parameter tensor in order.
pub fn batch_loss(
    params: &ModelParams,
    stcs: &[&Stc],
    weights: &LossWeights,
    want_grads: bool,
) -> Result<(BatchLoss, Option<Vec<Tensor<f32>>>), ModelError> {
    let batch = StcBatch::<f32>::from_stcs(stcs)?;
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), want_grads)).collect();
    let weight_vars: Vec<Var> = params
        .arch
        .param_specs()
        .iter()
        .zip(&vars)
        .filter(|(s, _)| s.kind == ParamKind::Weight)
        .map(|(_, &v)| v)
        .collect();
    let frames = tape.constant(batch.frames);
    let flows = params.arch.fusion.uses_flow().then(|| tape.constant(batch.flows));
    let target = tape.constant(batch.target);
    let fv = forward(&mut tape, &params.arch, &vars, frames, flows)?;
    let terms = total_loss(&mut tape, fv.prediction, target, fv.fea_frame, fv.fea_flow, &weight_vars, weights)?;
    let val = |v: Var| tape.value(v).item() as f64;
    let loss = BatchLoss {
        l_int: val(terms.intensity),
        l_gd: val(terms.gradient),
        l_sim: terms.consistency.map(val).unwrap_or(0.0),
        l_reg: val(terms.model),
        total: val(terms.total),
    };
    if !want_grads || !loss.total.is_finite() {
        return Ok((loss, None));
    }
    let mut grads = tape.backward(terms.total)?;
    let g = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss, Some(g)))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Trains `params` in place of a fresh init. The shuffle order depends only
/// on `config.seed`.
pub fn train(
    stcs: &[Stc],
    mut params: ModelParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if stcs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..stcs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut acc = BatchLoss::default();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Stc> = idx.iter().map(|&i| &stcs[i]).collect();
            let (loss, grads) = batch_loss(&params, &batch, &config.weights, true)?;
            let grads = match grads {
                Some(g) if g.iter().all(|t| t.all_finite()) => g,
                _ => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        clip: batch[0].clip_id.clone(),
                        frame: batch[0].target_frame,
                    })
                }
            };
            adam.step(&mut params, &grads, lr);
            let n = batch.len() as f64;
            acc.l_int += loss.l_int * n;
            acc.l_gd += loss.l_gd * n;
            acc.l_sim += loss.l_sim * n;
            acc.l_reg += loss.l_reg * n;
            acc.total += loss.total * n;
        }
        let n = stcs.len() as f64;
        let entry = EpochLog {
            epoch,
            l_int: acc.l_int / n,
            l_gd: acc.l_gd / n,
            l_sim: acc.l_sim / n,
            l_reg: acc.l_reg / n,
            total: acc.total / n,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    if let Some(path) = &config.checkpoint {
        save_checkpoint(&params, path)?;
    }
    Ok(TrainOutcome { params, log })
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let io = |e: csv::Error| TrainError::Io(path.display().to_string(), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for e in log {
        w.serialize(e).map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Io(path.display().to_string(), e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub u_f: f64,
    pub delta_f: f64,
    pub u_p: f64,
    pub delta_p: f64,
}

fn mean_std(xs: &[f64], what: &str) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DELTA_FLOOR {
        log::warn!("standard deviation of {what} is {std:e}; using {DELTA_FLOOR:e}");
        return (mean, DELTA_FLOOR);
    }
    (mean, std)
}

impl NormStats {
    /// Population mean and standard deviation of each score.
    pub fn from_samples(s_f: &[f64], s_p: &[f64]) -> Result<Self, TrainError> {
        if s_f.is_empty() || s_p.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let (u_f, delta_f) = mean_std(s_f, "S_f");
        let (u_p, delta_p) = mean_std(s_p, "S_p");
        Ok(Self {
            u_f,
            delta_f,
            u_p,
            delta_p,
        })
    }
}

/// Statistics of both raw scores over the normal training cubes.
pub fn compute_norm_stats(params: &ModelParams, stcs: &[Stc], batch: usize) -> Result<NormStats, TrainError> {
    if stcs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let refs: Vec<&Stc> = stcs.iter().collect();
    let scores = score_stcs(params, &refs, batch)?;
    let s_f: Vec<f64> = scores.iter().map(|s| s.s_f).collect();
    let s_p: Vec<f64> = scores.iter().map(|s| s.s_p).collect();
    NormStats::from_samples(&s_f, &s_p)
}
