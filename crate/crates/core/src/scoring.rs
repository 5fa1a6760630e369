//! Test-time anomaly scores, per-frame aggregation, and frame-level AUROC.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FrameLabel, Stc};
use crate::losses::COSINE_EPS;
use crate::model::{forward, ModelError, ModelParams, StcBatch};
use crate::numerics::{Tape, Var};
use crate::training::NormStats;

pub const OBJECT_HEADER: &str = "clip,frame,object_id,s_f,s_p,s_fused";
pub const FRAME_HEADER: &str = "clip,frame,score,label";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("score weights ({w_f}, {w_p}) must be finite, >= 0 and not both zero")]
    InvalidWeights { w_f: f64, w_p: f64 },
    #[error("AUROC is undefined: {0}")]
    Undefined(String),
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score for clip {clip} frame {frame}")]
    NonFinite { clip: String, frame: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}: {1}")]
    Csv(String, #[source] csv::Error),
    #[error("malformed score file: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub w_f: f64,
    pub w_p: f64,
}

impl ScoreWeights {
    pub const PED2: ScoreWeights = ScoreWeights { w_f: 1.0, w_p: 0.01 };
    pub const AVENUE: ScoreWeights = ScoreWeights { w_f: 0.2, w_p: 0.8 };
    pub const SHANGHAITECH: ScoreWeights = ScoreWeights { w_f: 0.4, w_p: 0.6 };

    pub fn new(w_f: f64, w_p: f64) -> Result<Self, ScoringError> {
        let w = Self { w_f, w_p };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_f) || !ok(self.w_p) || (self.w_f == 0.0 && self.w_p == 0.0) {
            return Err(ScoringError::InvalidWeights {
                w_f: self.w_f,
                w_p: self.w_p,
            });
        }
        Ok(())
    }
}

/// Raw per-object scores before normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectScore {
    /// Appearance/motion inconsistency, `1 - cos`.
    pub s_f: f64,
    /// Mean squared error of the clamped prediction.
    pub s_p: f64,
}

/// `1 - <a,b> / (|a||b| + eps)`, accumulated in f64.
pub fn feature_inconsistency(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)
}

/// Mean squared error after clamping the prediction to `[0, 1]`.
pub fn prediction_error(pred: &[f32], target: &[f32]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.clamp(0.0, 1.0) as f64 - t as f64;
            d * d
        })
        .sum();
    sum / pred.len() as f64
}

/// Scores every cube, `batch` cubes per forward pass. Models without a flow
/// stream report `s_f = 0`.
pub fn score_stcs(params: &ModelParams, stcs: &[&Stc], batch: usize) -> Result<Vec<ObjectScore>, ModelError> {
    let mut out = Vec::with_capacity(stcs.len());
    for chunk in stcs.chunks(batch.max(1)) {
        let b = StcBatch::<f32>::from_stcs(chunk)?;
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let frames = tape.constant(b.frames);
        let flows = params.arch.fusion.uses_flow().then(|| tape.constant(b.flows));
        let fv = forward(&mut tape, &params.arch, &vars, frames, flows)?;
        let pred = tape.value(fv.prediction);
        let fea_frame = tape.value(fv.fea_frame);
        for i in 0..chunk.len() {
            let s_f = match fv.fea_flow {
                Some(m) => feature_inconsistency(fea_frame.outer(i), tape.value(m).outer(i)),
                None => 0.0,
            };
            let s_p = prediction_error(pred.outer(i), b.target.outer(i));
            out.push(ObjectScore { s_f, s_p });
        }
    }
    Ok(out)
}

pub fn object_scores(params: &ModelParams, stc: &Stc) -> Result<ObjectScore, ModelError> {
    Ok(score_stcs(params, &[stc], 1)?[0])
}

/// `w_f (S_f - u_f) / d_f + w_p (S_p - u_p) / d_p`.
pub fn fuse_score(s_f: f64, s_p: f64, stats: &NormStats, weights: &ScoreWeights) -> f64 {
    weights.w_f * (s_f - stats.u_f) / stats.delta_f + weights.w_p * (s_p - stats.u_p) / stats.delta_p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub clip: String,
    pub frame: usize,
    pub object_id: Option<u32>,
    pub s_f: f64,
    pub s_p: f64,
    pub s_fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub clip: String,
    pub frame: usize,
    pub score: f64,
    pub label: u8,
}

/// Maximum fused score among a frame's objects.
pub fn frame_score(fused: &[f64]) -> Option<f64> {
    fused.iter().copied().reduce(f64::max)
}

/// One score per labelled frame. Frames without any object take the lowest
/// fused score seen over all records.
pub fn frame_scores(records: &[ScoreRecord], labels: &[FrameLabel]) -> Result<Vec<FrameScore>, ScoringError> {
    if let Some(r) = records.iter().find(|r| !r.s_fused.is_finite()) {
        return Err(ScoringError::NonFinite {
            clip: r.clip.clone(),
            frame: r.frame,
        });
    }
    let mut by_frame: HashMap<(&str, usize), Vec<f64>> = HashMap::new();
    for r in records {
        by_frame.entry((r.clip.as_str(), r.frame)).or_default().push(r.s_fused);
    }
    if records.is_empty() {
        return Err(ScoringError::Undefined("no object scores".into()));
    }
    let floor = records.iter().map(|r| r.s_fused).fold(f64::INFINITY, f64::min);
    Ok(labels
        .iter()
        .map(|l| FrameScore {
            clip: l.clip.clone(),
            frame: l.frame,
            score: by_frame
                .get(&(l.clip.as_str(), l.frame))
                .and_then(|v| frame_score(v))
                .unwrap_or(floor),
            label: l.label,
        })
        .collect())
}

/// Rank-based (Mann-Whitney) AUROC; tied scores share their mean rank, so
/// each positive/negative tie counts one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, ScoringError> {
    if scores.len() != labels.len() {
        return Err(ScoringError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ScoringError::Undefined("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ScoringError::Undefined(format!("{pos} positive and {neg} negative frames")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Serialize, Deserialize)]
struct ObjectRow<'a> {
    clip: &'a str,
    frame: usize,
    object_id: Option<u32>,
    s_f: f64,
    s_p: f64,
    s_fused: f64,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ScoringError + '_ {
    move |e| ScoringError::Csv(path.display().to_string(), e)
}

pub fn write_object_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(ObjectRow {
            clip: &r.clip,
            frame: r.frame,
            object_id: r.object_id,
            s_f: r.s_f,
            s_p: r.s_p,
            s_fused: r.s_fused,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

pub fn write_frame_scores(path: &Path, frames: &[FrameScore]) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for f in frames {
        w.serialize(f).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

pub fn read_frame_scores(path: &Path) -> Result<Vec<FrameScore>, ScoringError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if header != FRAME_HEADER {
        return Err(ScoringError::Malformed(format!(
            "{}: header `{header}`, expected `{FRAME_HEADER}`",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}
