//! Two-stream encoder, fusion, and skip-connected decoder.
//!
//! Each encoder block is `conv3x3 -> ReLU -> conv3x3/2 -> ReLU`; the
//! pre-downsampling activation of every frame-stream block is kept as a
//! skip. The flow stream has the same layout with `2t` input channels and
//! its own weights. Decoder level `j` (deepest first) is
//! `upsample2x -> conv3x3 -> ReLU -> concat(skip)`, followed by a final
//! `conv3x3` to one channel with no output nonlinearity.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use forward::{decode, encode_two_stream, forward, gated_fusion, ForwardVars, StcBatch};

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// How the two bottleneck features are combined before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `sigmoid(frame) * flow + frame`.
    Gated,
    /// `frame + flow`; the two-stream model without the gate.
    Additive,
    /// No flow stream; the frame feature is decoded directly.
    FrameOnly,
}

impl FusionMode {
    pub fn uses_flow(self) -> bool {
        self != FusionMode::FrameOnly
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            FusionMode::Gated => 0,
            FusionMode::Additive => 1,
            FusionMode::FrameOnly => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FusionMode::Gated),
            1 => Some(FusionMode::Additive),
            2 => Some(FusionMode::FrameOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// History length `t`.
    pub window: usize,
    /// Side length of the input patches.
    pub patch: usize,
    /// Output channels of each encoder block, shallowest first.
    pub channels: Vec<usize>,
    /// Output channels of each decoder level, deepest first.
    pub decoder_channels: Vec<usize>,
    pub fusion: FusionMode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            window: 4,
            patch: 32,
            channels: vec![32, 64, 128],
            decoder_channels: vec![128, 64, 32],
            fusion: FusionMode::Gated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn conv(prefix: String, out: usize, inp: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![out, inp, 3, 3],
                kind: ParamKind::Weight,
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![out],
                kind: ParamKind::Bias,
            },
        ]
    }
}

impl Architecture {
    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Spatial side of the bottleneck feature.
    pub fn bottleneck_side(&self) -> usize {
        self.patch >> self.blocks()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArchitecture(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("encoder channels {:?}", self.channels));
        }
        if self.decoder_channels.len() != self.channels.len() || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder channels {:?} must list one positive width per encoder block",
                self.decoder_channels
            ));
        }
        let scale = 1usize << self.blocks();
        if self.patch < scale || self.patch % scale != 0 {
            return bad(format!("patch {} not divisible by 2^{}", self.patch, self.blocks()));
        }
        Ok(())
    }

    /// Every parameter tensor, in the canonical order shared by
    /// [`ModelParams`], the forward pass, and checkpoints.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut streams = vec![("frame_enc", self.window)];
        if self.fusion.uses_flow() {
            streams.push(("flow_enc", 2 * self.window));
        }
        for (stream, in_ch) in streams {
            let mut inp = in_ch;
            for (b, &c) in self.channels.iter().enumerate() {
                specs.extend(ParamSpec::conv(format!("{stream}.{b}.conv1"), c, inp));
                specs.extend(ParamSpec::conv(format!("{stream}.{b}.conv2"), c, c));
                inp = c;
            }
        }
        let mut x_ch = *self.channels.last().expect("validated");
        for (j, &d) in self.decoder_channels.iter().enumerate() {
            let skip = self.channels[self.blocks() - 1 - j];
            specs.extend(ParamSpec::conv(format!("dec.{j}.conv"), d, x_ch));
            x_ch = d + skip;
        }
        specs.extend(ParamSpec::conv("dec.out".into(), 1, x_ch));
        specs
    }
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelParams {
    /// Fan-in scaled uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`),
    /// zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .param_specs()
            .into_iter()
            .map(|spec| {
                let t = match spec.kind {
                    ParamKind::Bias => Tensor::zeros(&spec.shape),
                    ParamKind::Weight => {
                        let fan_in: usize = spec.shape[1..].iter().product();
                        let bound = (6.0 / fan_in as f64).sqrt() as f32;
                        Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..=bound))
                    }
                };
                (spec.name, t)
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let tensors = arch
            .param_specs()
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks names, order, shapes and finiteness against the architecture.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        let specs = self.arch.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::InvalidArchitecture(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Numerics(NumericsError::NonFinite { name: name.clone() }));
            }
        }
        Ok(())
    }

    /// CRC32 of the encoded architecture metadata.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(&checkpoint::encode_architecture(&self.arch))
    }
}
