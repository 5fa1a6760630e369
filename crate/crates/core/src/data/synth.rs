//! Seeded synthetic surveillance video.
//!
//! Normal activity is circular sprites drifting at 1-2 px/frame over a static
//! textured background, reflecting off the frame border. Test clips add
//! anomalous events: fast sprites (5-6.5 px/frame) or square sprites moving
//! at normal speed. Flow is the exact per-frame sprite displacement inside
//! each sprite mask and zero on the background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{denormalize_pixel, normalize_pixel, DataError, RoIBox, VideoClip};
use crate::flow::FlowField;
use crate::plane::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Circular sprite moving at 5 px/frame or more.
    Fast,
    /// Square sprite at normal speed.
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Concurrent normal sprites per clip.
    pub normal_sprites: usize,
    /// Anomalous events per test clip.
    pub anomalies_per_clip: usize,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_clips: 8,
            test_clips: 4,
            frames: 120,
            height: 64,
            width: 64,
            normal_sprites: 2,
            anomalies_per_clip: 2,
            anomaly_kinds: vec![AnomalyKind::Fast, AnomalyKind::Square],
            fps: 25.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.train_clips == 0 {
            return bad("train_clips must be at least 1");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.height < 24 || self.width < 24 {
            return bad("frame size must be at least 24x24");
        }
        if self.normal_sprites == 0 {
            return bad("normal_sprites must be at least 1");
        }
        if self.anomalies_per_clip > 0 && self.anomaly_kinds.is_empty() {
            return bad("anomaly_kinds is empty but anomalies_per_clip > 0");
        }
        Ok(())
    }
}

/// One scripted anomalous event, visible on frames `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventSpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip: VideoClip,
    pub boxes: Vec<RoIBox>,
    /// `frames - 1` fields; entry `k` maps frame `k` to `k + 1`.
    pub flows: Vec<FlowField>,
    /// Per-frame label, 1 iff an anomalous sprite is visible.
    pub labels: Vec<u8>,
    pub anomalous_objects: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub train: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..config.train_clips)
        .map(|i| generate_clip(&format!("clip_{i:03}"), config, &[], &mut rng))
        .collect();
    let test = (0..config.test_clips)
        .map(|i| {
            let events = schedule_events(config, i, &mut rng);
            generate_clip(&format!("clip_{i:03}"), config, &events, &mut rng)
        })
        .collect();
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        train,
        test,
    })
}

/// Frame from which anomalous events may start.
const FIRST_EVENT_FRAME: usize = 12;

fn schedule_events(config: &SynthConfig, clip_index: usize, rng: &mut ChaCha8Rng) -> Vec<EventSpec> {
    let n = config.anomalies_per_clip;
    if n == 0 || config.frames <= FIRST_EVENT_FRAME {
        return Vec::new();
    }
    let segment = (config.frames - FIRST_EVENT_FRAME) / n;
    if segment < 6 {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let kind = config.anomaly_kinds[(clip_index + i) % config.anomaly_kinds.len()];
            let (lo, hi) = match kind {
                AnomalyKind::Fast => (10, 16),
                AnomalyKind::Square => (15, 25),
            };
            let max_len = segment - 2;
            let len = rng.gen_range(lo.min(max_len)..=hi.min(max_len));
            let seg_start = FIRST_EVENT_FRAME + i * segment;
            let start = seg_start + rng.gen_range(0..=segment - 1 - len);
            EventSpec {
                kind,
                start,
                end: start + len - 1,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
}

#[derive(Clone, Debug)]
struct Sprite {
    shape: Shape,
    /// Radius, or half side for squares.
    extent: f32,
    intensity: f32,
    object_id: u32,
    start: usize,
    end: usize,
    /// Centre positions for frames `start ..= end + 1`.
    path: Vec<(f32, f32)>,
}

impl Sprite {
    fn alive(&self, k: usize) -> bool {
        k >= self.start && k <= self.end
    }

    fn position(&self, k: usize) -> (f32, f32) {
        self.path[k - self.start]
    }

    fn covers(&self, cx: f32, cy: f32, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.extent * self.extent,
            Shape::Square => dx.abs() <= self.extent && dy.abs() <= self.extent,
        }
    }

    /// Pixel coordinates covered at frame `k`.
    fn mask(&self, k: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (cx, cy) = self.position(k);
        let e = self.extent;
        let y0 = (cy - e).floor().max(0.0) as usize;
        let y1 = ((cy + e).ceil() as usize).min(height - 1);
        let x0 = (cx - e).floor().max(0.0) as usize;
        let x1 = ((cx + e).ceil() as usize).min(width - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.covers(cx, cy, x, y) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn simulate(
    start: (f32, f32),
    velocity: (f32, f32),
    extent: f32,
    steps: usize,
    height: usize,
    width: usize,
) -> Vec<(f32, f32)> {
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = velocity;
    let (max_x, max_y) = ((width - 1) as f32 - extent, (height - 1) as f32 - extent);
    let mut path = Vec::with_capacity(steps + 1);
    path.push((x, y));
    for _ in 0..steps {
        if x + vx < extent || x + vx > max_x {
            vx = -vx;
        }
        if y + vy < extent || y + vy > max_y {
            vy = -vy;
        }
        x = (x + vx).clamp(extent, max_x);
        y = (y + vy).clamp(extent, max_y);
        path.push((x, y));
    }
    path
}

#[allow(clippy::too_many_arguments)]
fn spawn(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    speed: (f32, f32),
    object_id: u32,
    start: usize,
    end: usize,
    height: usize,
    width: usize,
) -> Sprite {
    let extent = rng.gen_range(4.0f32..=6.0);
    let intensity = rng.gen_range(0.7f32..=0.95);
    let cx = rng.gen_range(extent..=(width - 1) as f32 - extent);
    let cy = rng.gen_range(extent..=(height - 1) as f32 - extent);
    let s = rng.gen_range(speed.0..=speed.1);
    let angle = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let path = simulate((cx, cy), (s * angle.cos(), s * angle.sin()), extent, end + 1 - start, height, width);
    Sprite {
        shape,
        extent,
        intensity,
        object_id,
        start,
        end,
        path,
    }
}

fn background(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Plane {
    let gratings: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.4f32..0.4),
                rng.gen_range(-0.4f32..0.4),
                rng.gen_range(0.0f32..std::f32::consts::TAU),
                rng.gen_range(0.04f32..0.08),
            )
        })
        .collect();
    let noise: Vec<f32> = (0..height * width).map(|_| rng.gen_range(-0.03f32..0.03)).collect();
    Plane::from_fn(height, width, |y, x| {
        let wave: f32 = gratings
            .iter()
            .map(|&(fx, fy, phase, amp)| amp * (fx * x as f32 + fy * y as f32 + phase).sin())
            .sum();
        (0.32 + wave + noise[y * width + x]).clamp(0.05, 0.6)
    })
}

const NORMAL_SPEED: (f32, f32) = (1.0, 2.0);
const FAST_SPEED: (f32, f32) = (5.0, 6.5);

/// Renders one clip with `config.normal_sprites` normal sprites alive
/// throughout and the given anomalous events on top.
pub fn generate_clip(
    id: &str,
    config: &SynthConfig,
    events: &[EventSpec],
    rng: &mut ChaCha8Rng,
) -> SyntheticClip {
    let (h, w, n) = (config.height, config.width, config.frames);
    let bg = background(rng, h, w);
    let mut sprites: Vec<Sprite> = (0..config.normal_sprites)
        .map(|i| spawn(rng, Shape::Circle, NORMAL_SPEED, i as u32, 0, n - 1, h, w))
        .collect();
    let mut anomalous_objects = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let id = (config.normal_sprites + i) as u32;
        let end = e.end.min(n - 1);
        let sprite = match e.kind {
            AnomalyKind::Fast => spawn(rng, Shape::Circle, FAST_SPEED, id, e.start, end, h, w),
            AnomalyKind::Square => spawn(rng, Shape::Square, NORMAL_SPEED, id, e.start, end, h, w),
        };
        anomalous_objects.push(id);
        sprites.push(sprite);
    }

    render(id, config, &bg, &sprites, anomalous_objects)
}

fn render(
    id: &str,
    config: &SynthConfig,
    bg: &Plane,
    sprites: &[Sprite],
    anomalous_objects: Vec<u32>,
) -> SyntheticClip {
    let (h, w, n) = (config.height, config.width, config.frames);
    let mut frames = Vec::with_capacity(n);
    let mut flows = Vec::with_capacity(n.saturating_sub(1));
    let mut boxes = Vec::new();
    let mut labels = vec![0u8; n];
    for k in 0..n {
        let mut frame = bg.clone();
        let mut flow = FlowField::zeros(h, w);
        for s in sprites.iter().filter(|s| s.alive(k)) {
            let mask = s.mask(k, h, w);
            let (cx, cy) = s.position(k);
            let (nx, ny) = s.path[k + 1 - s.start];
            let (du, dv) = (nx - cx, ny - cy);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &(y, x) in &mask {
                frame.set(y, x, s.intensity);
                flow.u.set(y, x, du);
                flow.v.set(y, x, dv);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            boxes.push(RoIBox {
                frame: k,
                x: x0 as u32,
                y: y0 as u32,
                w: (x1 - x0 + 1) as u32,
                h: (y1 - y0 + 1) as u32,
                object_id: s.object_id,
            });
            if anomalous_objects.contains(&s.object_id) {
                labels[k] = 1;
            }
        }
        // Frames are stored as 8-bit images; quantize here so in-memory and
        // on-disk datasets agree.
        frame
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = normalize_pixel(denormalize_pixel(*v)));
        frames.push(frame);
        if k + 1 < n {
            flows.push(flow);
        }
    }
    SyntheticClip {
        clip: VideoClip::new(id, frames, config.fps).expect("uniform frame size"),
        boxes,
        flows,
        labels,
        anomalous_objects,
    }
}
