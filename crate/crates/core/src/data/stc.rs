use super::{DataError, RoIBox, VideoClip};
use crate::flow::FlowField;
use crate::numerics::Tensor;
use crate::plane::{resize_ratio, Plane};

/// Side length of every cube slice.
pub const PATCH_SIZE: usize = 32;

/// Spatial-temporal cube around one object: the box region in the current
/// frame and its `t` predecessors, plus the `t` flows between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Stc {
    /// `[t + 1, P, P]`, oldest slice first; the last slice is the current frame.
    pub frames: Tensor<f32>,
    /// `[t, 2, P, P]`; slice `i` is the flow from window frame `i` to `i + 1`,
    /// channel 0 horizontal, channel 1 vertical.
    pub flows: Tensor<f32>,
    pub clip_id: String,
    pub target_frame: usize,
    pub object_id: u32,
}

impl Stc {
    /// Number of history frames `t`.
    pub fn window(&self) -> usize {
        self.flows.shape()[0]
    }

    pub fn patch(&self) -> usize {
        self.frames.shape()[1]
    }

    /// The `t` history slices, `t * P * P` values.
    pub fn input_frames(&self) -> &[f32] {
        let n = self.window() * self.patch() * self.patch();
        &self.frames.data()[..n]
    }

    /// The current-frame slice the model learns to predict.
    pub fn target(&self) -> &[f32] {
        let n = self.window() * self.patch() * self.patch();
        &self.frames.data()[n..]
    }
}

pub fn build_stc(clip: &VideoClip, bbox: &RoIBox, window: usize, flows: &[FlowField]) -> Result<Stc, DataError> {
    build_stc_sized(clip, bbox, window, flows, PATCH_SIZE)
}

/// Crops `bbox` from frames `frame - t ..= frame` and from the flows
/// `frame - t .. frame` (flow `k` maps frame `k` to `k + 1`), resizing every
/// crop to `patch x patch`. Flow components are multiplied by the resize
/// ratio of their axis.
pub fn build_stc_sized(
    clip: &VideoClip,
    bbox: &RoIBox,
    window: usize,
    flows: &[FlowField],
    patch: usize,
) -> Result<Stc, DataError> {
    let frame = bbox.frame;
    if frame < window {
        return Err(DataError::WindowTooShort { frame, window });
    }
    let (h, w) = clip.dims();
    if frame >= clip.len() || !bbox.fits(h, w) {
        return Err(DataError::InvalidBox {
            bbox: *bbox,
            height: h,
            width: w,
        });
    }
    if flows.len() < frame {
        return Err(DataError::Malformed(format!(
            "clip {}: need flows up to frame {}, have {}",
            clip.id,
            frame - 1,
            flows.len()
        )));
    }
    let (x, y, bw, bh) = (bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
    let crop = |p: &Plane| p.crop(y, x, bh, bw).resize_bilinear(patch, patch);

    let mut frame_data = Vec::with_capacity((window + 1) * patch * patch);
    for k in frame - window..=frame {
        frame_data.extend_from_slice(crop(&clip.frames[k]).data());
    }

    let (sx, sy) = (resize_ratio(bw, patch), resize_ratio(bh, patch));
    let mut flow_data = Vec::with_capacity(window * 2 * patch * patch);
    for field in &flows[frame - window..frame] {
        if field.dims() != (h, w) {
            return Err(DataError::Malformed(format!(
                "clip {}: flow is {:?}, frames are {:?}",
                clip.id,
                field.dims(),
                (h, w)
            )));
        }
        let mut u = crop(&field.u);
        u.scale(sx);
        let mut v = crop(&field.v);
        v.scale(sy);
        flow_data.extend_from_slice(u.data());
        flow_data.extend_from_slice(v.data());
    }

    Ok(Stc {
        frames: Tensor::new(vec![window + 1, patch, patch], frame_data).expect("frame cube shape"),
        flows: Tensor::new(vec![window, 2, patch, patch], flow_data).expect("flow cube shape"),
        clip_id: clip.id.clone(),
        target_frame: frame,
        object_id: bbox.object_id,
    })
}

/// Every cube of a clip; boxes on frames with fewer than `t` predecessors are
/// skipped.
pub fn extract_stcs(
    clip: &VideoClip,
    boxes: &[RoIBox],
    flows: &[FlowField],
    window: usize,
    patch: usize,
) -> Result<Vec<Stc>, DataError> {
    boxes
        .iter()
        .filter(|b| b.frame >= window)
        .map(|b| build_stc_sized(clip, b, window, flows, patch))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, f: impl Fn(usize, usize, usize) -> f32) -> VideoClip {
        let frames = (0..n).map(|k| Plane::from_fn(48, 48, |y, x| f(k, y, x))).collect();
        VideoClip::new("c0", frames, 25.0).unwrap()
    }

    fn bbox(frame: usize, x: u32, y: u32, w: u32, h: u32) -> RoIBox {
        RoIBox {
            frame,
            x,
            y,
            w,
            h,
            object_id: 3,
        }
    }

    #[test]
    fn window_uses_previous_t_frames() {
        // Frame k is filled with k / 10 so each slice identifies its source.
        let c = clip(10, |k, _, _| k as f32 / 10.0);
        let flows: Vec<_> = (0..9)
            .map(|k| {
                let mut f = FlowField::zeros(48, 48);
                f.u = Plane::filled(48, 48, k as f32);
                f
            })
            .collect();
        let stc = build_stc(&c, &bbox(5, 4, 4, 32, 32), 4, &flows).unwrap();
        assert_eq!(stc.frames.shape(), &[5, 32, 32]);
        assert_eq!(stc.flows.shape(), &[4, 2, 32, 32]);
        for (i, k) in (1..=5).enumerate() {
            assert_eq!(stc.frames.outer(i)[0], k as f32 / 10.0);
        }
        for (i, k) in (1..5).enumerate() {
            assert_eq!(stc.flows.outer(i)[0], k as f32);
        }
        assert_eq!(stc.target()[0], 0.5);
    }

    #[test]
    fn early_frame_is_window_too_short() {
        let c = clip(10, |_, _, _| 0.0);
        let flows = vec![FlowField::zeros(48, 48); 9];
        let err = build_stc(&c, &bbox(3, 0, 0, 8, 8), 4, &flows).unwrap_err();
        assert!(matches!(err, DataError::WindowTooShort { frame: 3, window: 4 }));
    }

    #[test]
    fn box_outside_frame_is_invalid() {
        let c = clip(10, |_, _, _| 0.0);
        let flows = vec![FlowField::zeros(48, 48); 9];
        let err = build_stc(&c, &bbox(5, 40, 0, 16, 8), 4, &flows).unwrap_err();
        assert!(matches!(err, DataError::InvalidBox { .. }));
        assert!(build_stc(&c, &bbox(5, 0, 0, 0, 8), 4, &flows).is_err());
    }

    #[test]
    fn static_clip_gives_identical_slices_and_zero_flow() {
        let c = clip(8, |_, y, x| ((y * 3 + x * 5) % 7) as f32 / 7.0);
        let flows = vec![FlowField::zeros(48, 48); 7];
        let stc = build_stc(&c, &bbox(6, 8, 8, 32, 32), 4, &flows).unwrap();
        let first = stc.frames.outer(0).to_vec();
        for i in 1..5 {
            assert_eq!(stc.frames.outer(i), &first[..]);
        }
        assert!(stc.flows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_magnitudes_scale_with_resize_ratio() {
        let c = clip(6, |_, _, _| 0.0);
        let flows: Vec<_> = (0..5)
            .map(|_| FlowField {
                u: Plane::filled(48, 48, 2.0),
                v: Plane::filled(48, 48, -1.0),
            })
            .collect();
        // 16 px wide, 9 px tall -> ratios 31/15 and 31/8.
        let stc = build_stc(&c, &bbox(5, 2, 3, 16, 9), 4, &flows).unwrap();
        let plane = 32 * 32;
        assert!((stc.flows.data()[0] - 2.0 * 31.0 / 15.0).abs() < 1e-5);
        assert!((stc.flows.data()[plane] + 31.0 / 8.0).abs() < 1e-5);
    }

    #[test]
    fn extraction_skips_early_frames() {
        let c = clip(8, |_, _, _| 0.0);
        let flows = vec![FlowField::zeros(48, 48); 7];
        let boxes: Vec<_> = (0..8).map(|f| bbox(f, 0, 0, 10, 10)).collect();
        let stcs = extract_stcs(&c, &boxes, &flows, 4, 32).unwrap();
        assert_eq!(stcs.iter().map(|s| s.target_frame).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
    }
}
