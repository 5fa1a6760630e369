//! Optical flow fields and interchangeable providers: in-memory ground
//! truth, AMFL files on disk, and a block-matching estimator.

mod amfl;
mod block_matching;

use std::collections::HashMap;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use amfl::{decode, encode, load_flow, save_flow, MAGIC};
pub use block_matching::{block_matching_flow, DEFAULT_BLOCK, DEFAULT_RADIUS};

use crate::data::VideoClip;
use crate::plane::Plane;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("bad magic: not an AMFL flow file")]
    BadMagic,
    #[error("truncated flow file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("flow file has trailing bytes: expected {expected}, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no flow for clip {clip} frame {frame}")]
    Missing { clip: String, frame: usize },
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
}

/// Per-pixel displacement (px/frame) from frame `k` to `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Plane::filled(height, width, 0.0),
            v: Plane::filled(height, width, 0.0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }
}

/// Source of the flow between consecutive frames of a clip.
pub trait FlowProvider {
    /// Flow from frame `k` to frame `k + 1`.
    fn flow(&self, clip: &VideoClip, k: usize) -> Result<FlowField, FlowError>;

    /// All `len - 1` consecutive-pair flows of a clip.
    fn flows(&self, clip: &VideoClip) -> Result<Vec<FlowField>, FlowError> {
        (0..clip.frames.len().saturating_sub(1))
            .map(|k| self.flow(clip, k))
            .collect()
    }
}

/// Analytic fields held in memory, keyed by clip id.
#[derive(Default)]
pub struct GroundTruthFlow {
    fields: HashMap<String, Vec<FlowField>>,
}

impl GroundTruthFlow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, clip_id: impl Into<String>, flows: Vec<FlowField>) {
        self.fields.insert(clip_id.into(), flows);
    }
}

impl FlowProvider for GroundTruthFlow {
    fn flow(&self, clip: &VideoClip, k: usize) -> Result<FlowField, FlowError> {
        self.fields
            .get(&clip.id)
            .and_then(|f| f.get(k))
            .cloned()
            .ok_or_else(|| FlowError::Missing {
                clip: clip.id.clone(),
                frame: k,
            })
    }
}

/// AMFL files at `<root>/<clip id>/flows/<k:06>.amfl`.
pub struct FileFlow {
    root: PathBuf,
}

impl FileFlow {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, clip_id: &str, k: usize) -> PathBuf {
        self.root.join(clip_id).join("flows").join(format!("{k:06}.amfl"))
    }
}

impl FlowProvider for FileFlow {
    fn flow(&self, clip: &VideoClip, k: usize) -> Result<FlowField, FlowError> {
        let path = self.path(&clip.id, k);
        if !path.exists() {
            return Err(FlowError::Missing {
                clip: clip.id.clone(),
                frame: k,
            });
        }
        load_flow(&path)
    }
}

/// Estimates flow from the frames themselves.
#[derive(Clone, Copy, Debug)]
pub struct BlockMatching {
    pub block: usize,
    pub radius: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            block: DEFAULT_BLOCK,
            radius: DEFAULT_RADIUS,
        }
    }
}

impl FlowProvider for BlockMatching {
    fn flow(&self, clip: &VideoClip, k: usize) -> Result<FlowField, FlowError> {
        let (a, b) = match (clip.frames.get(k), clip.frames.get(k + 1)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(FlowError::Missing {
                    clip: clip.id.clone(),
                    frame: k,
                })
            }
        };
        block_matching_flow(a, b, self.block, self.radius)
    }
}
