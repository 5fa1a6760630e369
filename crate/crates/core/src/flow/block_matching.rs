use super::{FlowError, FlowField};
use crate::plane::Plane;

pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_RADIUS: usize = 4;

/// Integer-displacement block matching.
///
/// The frame is tiled into `block x block` tiles (edge tiles are clipped).
/// Each tile takes the displacement `(u, v)` within `±radius` that minimises
/// the sum of absolute differences against `frame_b`, considering only
/// displacements that keep the tile inside the frame. Ties go to the
/// smallest displacement magnitude, then to the lexicographically smallest
/// `(u, v)`. Every pixel of a tile receives the tile's displacement.
pub fn block_matching_flow(
    frame_a: &Plane,
    frame_b: &Plane,
    block: usize,
    radius: usize,
) -> Result<FlowField, FlowError> {
    if frame_a.dims() != frame_b.dims() {
        return Err(FlowError::InvalidInput(format!(
            "frame sizes differ: {:?} vs {:?}",
            frame_a.dims(),
            frame_b.dims()
        )));
    }
    let (h, w) = frame_a.dims();
    if block == 0 || h < block || w < block {
        return Err(FlowError::InvalidInput(format!(
            "frame {h}x{w} smaller than block {block}"
        )));
    }
    let r = radius as isize;
    let mut u = Plane::filled(h, w, 0.0);
    let mut v = Plane::filled(h, w, 0.0);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let bh = block.min(h - by);
            let bw = block.min(w - bx);
            // (sad, magnitude, du, dv)
            let mut best: Option<(f32, isize, isize, isize)> = None;
            for du in -r..=r {
                for dv in -r..=r {
                    let (ty, tx) = (by as isize + dv, bx as isize + du);
                    if ty < 0 || tx < 0 || ty as usize + bh > h || tx as usize + bw > w {
                        continue;
                    }
                    let mut sad = 0.0f32;
                    for yy in 0..bh {
                        for xx in 0..bw {
                            let a = frame_a.get(by + yy, bx + xx);
                            let b = frame_b.get(ty as usize + yy, tx as usize + xx);
                            sad += (a - b).abs();
                        }
                    }
                    let cand = (sad, du * du + dv * dv, du, dv);
                    let better = match best {
                        None => true,
                        Some(b) => {
                            cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2, cand.3) < (b.1, b.2, b.3))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, du, dv) = best.expect("zero displacement is always in range");
            for yy in 0..bh {
                for xx in 0..bw {
                    u.set(by + yy, bx + xx, du as f32);
                    v.set(by + yy, bx + xx, dv as f32);
                }
            }
        }
    }
    Ok(FlowField { u, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize) -> Plane {
        // Non-periodic texture so every shift has a unique best match.
        Plane::from_fn(h, w, |y, x| {
            let s = (y * 131 + x * 71 + (x * y) % 17) as f32;
            (s * 0.618).fract()
        })
    }

    fn shift(p: &Plane, du: isize, dv: isize) -> Plane {
        let (h, w) = p.dims();
        Plane::from_fn(h, w, |y, x| {
            let sy = (y as isize - dv).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - du).clamp(0, w as isize - 1) as usize;
            p.get(sy, sx)
        })
    }

    #[test]
    fn recovers_right_shift_on_interior_blocks() {
        let a = texture(32, 32);
        let b = shift(&a, 2, 0);
        let f = block_matching_flow(&a, &b, 8, 4).unwrap();
        for y in 8..24 {
            for x in 8..24 {
                assert_eq!((f.u.get(y, x), f.v.get(y, x)), (2.0, 0.0));
            }
        }
    }

    #[test]
    fn identical_frames_give_zero_field() {
        let a = texture(24, 24);
        let f = block_matching_flow(&a, &a, 8, 4).unwrap();
        assert!(f.u.data().iter().chain(f.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn flat_frames_tie_break_to_zero() {
        let a = Plane::filled(16, 16, 0.3);
        let f = block_matching_flow(&a, &a, 8, 4).unwrap();
        assert!(f.u.data().iter().chain(f.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn frames_smaller_than_block_are_rejected() {
        let a = Plane::filled(4, 16, 0.0);
        assert!(matches!(block_matching_flow(&a, &a, 8, 4), Err(FlowError::InvalidInput(_))));
    }

    #[test]
    fn recovers_every_shift_within_radius() {
        let a = texture(40, 40);
        for du in -3isize..=3 {
            for dv in -3isize..=3 {
                let b = shift(&a, du, dv);
                let f = block_matching_flow(&a, &b, 8, 4).unwrap();
                assert_eq!((f.u.get(20, 20), f.v.get(20, 20)), (du as f32, dv as f32), "shift ({du},{dv})");
            }
        }
    }
}
