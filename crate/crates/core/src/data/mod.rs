//! Video clips, object boxes, labels, spatial-temporal cube extraction and
//! the synthetic surveillance dataset.

mod dataset;
mod stc;
mod synth;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    load_split, read_boxes, read_labels, write_boxes, write_clip, write_labels, write_synthetic, FlowSource,
    LoadedClip, Split, BOX_HEADER, LABEL_HEADER,
};
pub use stc::{build_stc, build_stc_sized, extract_stcs, Stc, PATCH_SIZE};
pub use synth::{
    generate_clip, generate_synthetic, AnomalyKind, EventSpec, SynthConfig, SyntheticClip, SyntheticDataset,
};

use crate::flow::FlowError;
use crate::plane::Plane;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("window too short: frame {frame} has fewer than {window} predecessors")]
    WindowTooShort { frame: usize, window: usize },
    #[error("box {bbox:?} does not fit inside a {height}x{width} frame")]
    InvalidBox { bbox: RoIBox, height: usize, width: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("{0}: {1}")]
    Csv(String, #[source] csv::Error),
    #[error("{0}: {1}")]
    Image(String, #[source] image::ImageError),
}

/// Grayscale frames with values in `[0, 1]`, all of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Plane>,
    /// Informational only.
    pub fps: f32,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Vec<Plane>, fps: f32) -> Result<Self, DataError> {
        let id = id.into();
        let Some(first) = frames.first() else {
            return Err(DataError::Malformed(format!("clip {id} has no frames")));
        };
        let dims = first.dims();
        if let Some(i) = frames.iter().position(|f| f.dims() != dims) {
            return Err(DataError::Malformed(format!(
                "clip {id}: frame {i} is {:?}, expected {dims:?}",
                frames[i].dims()
            )));
        }
        Ok(Self { id, frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of every frame.
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// Axis-aligned object box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoIBox {
    pub frame: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub object_id: u32,
}

impl RoIBox {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x + self.w) as usize <= width
            && (self.y + self.h) as usize <= height
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabel {
    pub clip: String,
    pub frame: usize,
    /// 0 normal, 1 anomalous.
    pub label: u8,
}

pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn denormalize_pixel(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn normalize_frame(height: usize, width: usize, raw: &[u8]) -> Plane {
    Plane::new(height, width, raw.iter().map(|&v| normalize_pixel(v)).collect())
}

pub fn denormalize_frame(frame: &Plane) -> Vec<u8> {
    frame.data().iter().map(|&v| denormalize_pixel(v)).collect()
}
