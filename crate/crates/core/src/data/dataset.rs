//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.toml
//! <root>/{train,test}/<clip>/frames/000000.png   8-bit grayscale
//! <root>/{train,test}/<clip>/boxes.csv           frame,x,y,w,h,object_id
//! <root>/{train,test}/<clip>/labels.csv          frame,label
//! <root>/{train,test}/<clip>/flows/000000.amfl   flow from frame k to k+1 (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{denormalize_frame, normalize_frame, DataError, FrameLabel, RoIBox, SyntheticDataset, VideoClip};
use crate::flow::{save_flow, BlockMatching, FileFlow, FlowField, FlowProvider};
use crate::plane::Plane;

pub const BOX_HEADER: &str = "frame,x,y,w,h,object_id";
pub const LABEL_HEADER: &str = "frame,label";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Where clip flows come from when loading from disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// AMFL files when the clip has a `flows/` directory, else block matching.
    #[default]
    Auto,
    Files,
    BlockMatching,
}

#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub clip: VideoClip,
    pub boxes: Vec<RoIBox>,
    pub labels: Vec<FrameLabel>,
    pub flows: Vec<FlowField>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io(path.display().to_string(), e)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |e| DataError::Csv(path.display().to_string(), e)
}

fn frame_path(clip_dir: &Path, k: usize) -> PathBuf {
    clip_dir.join("frames").join(format!("{k:06}.png"))
}

pub fn write_boxes(path: &Path, boxes: &[RoIBox]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for b in boxes {
        w.serialize(b).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn check_header(path: &Path, reader: &mut csv::Reader<fs::File>, expected: &str) -> Result<(), DataError> {
    let header = reader.headers().map_err(csv_err(path))?;
    let got = header.iter().collect::<Vec<_>>().join(",");
    if got != expected {
        return Err(DataError::Malformed(format!(
            "{}: header `{got}`, expected `{expected}`",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<RoIBox>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    check_header(path, &mut r, BOX_HEADER)?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    frame: usize,
    label: u8,
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (frame, &label) in labels.iter().enumerate() {
        w.serialize(LabelRow { frame, label }).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_labels(path: &Path, clip: &str) -> Result<Vec<FrameLabel>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    check_header(path, &mut r, LABEL_HEADER)?;
    let mut out = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(csv_err(path))?;
        if row.label > 1 {
            return Err(DataError::Malformed(format!("{}: label {} not 0/1", path.display(), row.label)));
        }
        out.push(FrameLabel {
            clip: clip.to_string(),
            frame: row.frame,
            label: row.label,
        });
    }
    Ok(out)
}

/// Writes one clip directory. `flows` may be empty.
pub fn write_clip(
    clip_dir: &Path,
    clip: &VideoClip,
    boxes: &[RoIBox],
    labels: &[u8],
    flows: &[FlowField],
) -> Result<(), DataError> {
    let frames_dir = clip_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let (h, w) = clip.dims();
    for (k, frame) in clip.frames.iter().enumerate() {
        let path = frame_path(clip_dir, k);
        let img = image::GrayImage::from_raw(w as u32, h as u32, denormalize_frame(frame)).expect("frame buffer size");
        img.save(&path).map_err(|e| DataError::Image(path.display().to_string(), e))?;
    }
    write_boxes(&clip_dir.join("boxes.csv"), boxes)?;
    write_labels(&clip_dir.join("labels.csv"), labels)?;
    if !flows.is_empty() {
        let flow_dir = clip_dir.join("flows");
        fs::create_dir_all(&flow_dir).map_err(io_err(&flow_dir))?;
        for (k, f) in flows.iter().enumerate() {
            save_flow(f, &flow_dir.join(format!("{k:06}.amfl")))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    generator: &'a super::SynthConfig,
}

pub fn write_synthetic(root: &Path, dataset: &SyntheticDataset) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let manifest = toml::to_string(&Manifest {
        seed: dataset.seed,
        generator: &dataset.config,
    })
    .map_err(|e| DataError::Malformed(e.to_string()))?;
    let mpath = root.join("dataset.toml");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    for (split, clips) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for c in clips {
            let dir = root.join(split.dir_name()).join(&c.clip.id);
            write_clip(&dir, &c.clip, &c.boxes, &c.labels, &c.flows)?;
        }
    }
    Ok(())
}

fn read_frame(path: &Path) -> Result<Plane, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image(path.display().to_string(), e))?;
    // RGB input is reduced to luminance.
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(normalize_frame(h as usize, w as usize, gray.as_raw()))
}

fn read_clip(clip_dir: &Path, source: FlowSource) -> Result<LoadedClip, DataError> {
    let id = clip_dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DataError::Malformed(format!("bad clip dir {}", clip_dir.display())))?
        .to_string();
    let frames_dir = clip_dir.join("frames");
    let mut names: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(io_err(&frames_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let frames = names.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>, _>>()?;
    let clip = VideoClip::new(id.clone(), frames, 25.0)?;
    let boxes = read_boxes(&clip_dir.join("boxes.csv"))?;
    let labels = read_labels(&clip_dir.join("labels.csv"), &id)?;
    let (h, w) = clip.dims();
    if let Some(b) = boxes.iter().find(|b| !b.fits(h, w) || b.frame >= clip.len()) {
        return Err(DataError::InvalidBox {
            bbox: *b,
            height: h,
            width: w,
        });
    }
    let root = clip_dir.parent().unwrap_or(Path::new("."));
    let use_files = match source {
        FlowSource::Files => true,
        FlowSource::BlockMatching => false,
        FlowSource::Auto => clip_dir.join("flows").is_dir(),
    };
    let flows = if use_files {
        FileFlow::new(root).flows(&clip)?
    } else {
        BlockMatching::default().flows(&clip)?
    };
    Ok(LoadedClip {
        clip,
        boxes,
        labels,
        flows,
    })
}

/// Loads every clip of a split, in directory-name order.
pub fn load_split(root: &Path, split: Split, source: FlowSource) -> Result<Vec<LoadedClip>, DataError> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(DataError::Malformed(format!("missing split directory {}", dir.display())));
    }
    let mut clip_dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    clip_dirs.iter().map(|d| read_clip(d, source)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    #[test]
    fn box_csv_header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.csv");
        let b = RoIBox {
            frame: 3,
            x: 1,
            y: 2,
            w: 9,
            h: 11,
            object_id: 4,
        };
        write_boxes(&path, &[b]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), BOX_HEADER);
        assert_eq!(read_boxes(&path).unwrap(), vec![b]);

        fs::write(&path, "frame,x,y,width,h,object_id\n1,1,1,1,1,1\n").unwrap();
        assert!(matches!(read_boxes(&path), Err(DataError::Malformed(_))));
    }

    #[test]
    fn synthetic_dataset_roundtrips_through_disk() {
        let cfg = SynthConfig {
            train_clips: 1,
            test_clips: 1,
            frames: 16,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &ds).unwrap();
        let test = load_split(dir.path(), Split::Test, FlowSource::Auto).unwrap();
        assert_eq!(test.len(), 1);
        let (orig, back) = (&ds.test[0], &test[0]);
        assert_eq!(back.clip.frames, orig.clip.frames);
        assert_eq!(back.boxes, orig.boxes);
        assert_eq!(back.flows, orig.flows);
        let labels: Vec<u8> = back.labels.iter().map(|l| l.label).collect();
        assert_eq!(labels, orig.labels);
        let header = fs::read_to_string(dir.path().join("test/clip_000/labels.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap(), LABEL_HEADER);
    }

    #[test]
    fn missing_flows_fall_back_to_block_matching() {
        let cfg = SynthConfig {
            train_clips: 1,
            test_clips: 0,
            frames: 6,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let c = &ds.train[0];
        let dir = tempfile::tempdir().unwrap();
        let clip_dir = dir.path().join("train").join(&c.clip.id);
        write_clip(&clip_dir, &c.clip, &c.boxes, &c.labels, &[]).unwrap();
        let loaded = load_split(dir.path(), Split::Train, FlowSource::Auto).unwrap();
        assert_eq!(loaded[0].flows.len(), 5);
        assert!(load_split(dir.path(), Split::Train, FlowSource::Files).is_err());
    }
}
