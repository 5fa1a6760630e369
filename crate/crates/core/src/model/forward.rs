use super::{Architecture, ModelError};
use crate::data::Stc;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub fea_frame: Var,
    /// Absent for [`FusionMode::FrameOnly`](super::FusionMode::FrameOnly).
    pub fea_flow: Option<Var>,
    /// Frame-stream activations before each downsampling, shallowest first.
    pub skips: Vec<Var>,
    pub fused: Var,
    /// `[N, 1, P, P]`, unclamped.
    pub prediction: Var,
}

/// Walks parameter variables in [`Architecture::param_specs`] order.
struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn conv(&mut self) -> Result<(Var, Var), ModelError> {
        if self.next + 2 > self.vars.len() {
            return Err(ModelError::InvalidInput(format!(
                "parameter list too short ({} tensors)",
                self.vars.len()
            )));
        }
        let pair = (self.vars[self.next], self.vars[self.next + 1]);
        self.next += 2;
        Ok(pair)
    }
}

fn check_input<T: Scalar>(
    tape: &Tape<T>,
    var: Var,
    channels: usize,
    arch: &Architecture,
    what: &str,
) -> Result<(), ModelError> {
    let s = tape.shape(var);
    if s.len() != 4 || s[1] != channels || s[2] != arch.patch || s[3] != arch.patch {
        return Err(ModelError::InvalidInput(format!(
            "{what} cube has shape {s:?}, expected [N, {channels}, {p}, {p}]",
            p = arch.patch
        )));
    }
    Ok(())
}

fn encoder<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    cursor: &mut Cursor,
    input: Var,
    skips: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let mut x = input;
    let mut kept = Vec::new();
    for _ in 0..arch.blocks() {
        let (w1, b1) = cursor.conv()?;
        let (w2, b2) = cursor.conv()?;
        let h = tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let h = tape.relu(h);
        kept.push(h);
        let d = tape.conv2d(h, w2, Some(b2), 2, 1)?;
        x = tape.relu(d);
    }
    if let Some(s) = skips {
        *s = kept;
    }
    Ok(x)
}

/// Encodes `frames` `[N, t, P, P]` and `flows` `[N, 2t, P, P]` into two
/// bottleneck features of identical shape, both ending in ReLU.
pub fn encode_two_stream<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    params: &[Var],
    frames: Var,
    flows: Option<Var>,
) -> Result<(Var, Option<Var>, Vec<Var>), ModelError> {
    encode_inner(tape, arch, &mut Cursor { vars: params, next: 0 }, frames, flows)
}

fn encode_inner<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    cursor: &mut Cursor,
    frames: Var,
    flows: Option<Var>,
) -> Result<(Var, Option<Var>, Vec<Var>), ModelError> {
    check_input(tape, frames, arch.window, arch, "frame")?;
    let mut skips = Vec::new();
    let fea_frame = encoder(tape, arch, cursor, frames, Some(&mut skips))?;
    let fea_flow = match (arch.fusion.uses_flow(), flows) {
        (true, Some(f)) => {
            check_input(tape, f, 2 * arch.window, arch, "flow")?;
            if tape.shape(f)[0] != tape.shape(frames)[0] {
                return Err(ModelError::InvalidInput("frame and flow batch sizes differ".into()));
            }
            Some(encoder(tape, arch, cursor, f, None)?)
        }
        (true, None) => return Err(ModelError::InvalidInput("two-stream model needs a flow cube".into())),
        (false, _) => None,
    };
    Ok((fea_frame, fea_flow, skips))
}

/// `sigmoid(fea_frame) * fea_flow + fea_frame`.
pub fn gated_fusion<T: Scalar>(tape: &mut Tape<T>, fea_frame: Var, fea_flow: Var) -> Result<Var, ModelError> {
    if tape.shape(fea_frame) != tape.shape(fea_flow) {
        return Err(ModelError::InvalidInput(format!(
            "fusion inputs differ: {:?} vs {:?}",
            tape.shape(fea_frame),
            tape.shape(fea_flow)
        )));
    }
    let gate = tape.sigmoid(fea_frame);
    let gated = tape.mul(gate, fea_flow)?;
    Ok(tape.add(gated, fea_frame)?)
}

/// Decodes a fused bottleneck feature into a `[N, 1, P, P]` prediction.
///
/// `params` is the full parameter list; decoder tensors are located after
/// the encoder streams.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    params: &[Var],
    fused: Var,
    skips: &[Var],
) -> Result<Var, ModelError> {
    let encoder_tensors = arch.param_specs().iter().filter(|s| !s.name.starts_with("dec.")).count();
    decode_inner(
        tape,
        arch,
        &mut Cursor {
            vars: params,
            next: encoder_tensors,
        },
        fused,
        skips,
    )
}

fn decode_inner<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    cursor: &mut Cursor,
    fused: Var,
    skips: &[Var],
) -> Result<Var, ModelError> {
    if skips.len() != arch.blocks() {
        return Err(ModelError::InvalidInput(format!(
            "decoder needs {} skips, got {}",
            arch.blocks(),
            skips.len()
        )));
    }
    let mut x = fused;
    for j in 0..arch.blocks() {
        let (w, b) = cursor.conv()?;
        let skip = skips[arch.blocks() - 1 - j];
        let up = tape.upsample2x(x)?;
        let h = tape.conv2d(up, w, Some(b), 1, 1)?;
        let h = tape.relu(h);
        let (hs, ss) = (tape.shape(h), tape.shape(skip));
        if hs[0] != ss[0] || hs[2..] != ss[2..] {
            return Err(ModelError::InvalidInput(format!("skip {j} has shape {ss:?}, decoder is at {hs:?}")));
        }
        x = tape.concat(&[h, skip])?;
    }
    let (w, b) = cursor.conv()?;
    Ok(tape.conv2d(x, w, Some(b), 1, 1)?)
}

/// Full pass: encode, fuse per the architecture's fusion mode, decode.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    params: &[Var],
    frames: Var,
    flows: Option<Var>,
) -> Result<ForwardVars, ModelError> {
    use super::FusionMode;
    let mut cursor = Cursor { vars: params, next: 0 };
    let (fea_frame, fea_flow, skips) = encode_inner(tape, arch, &mut cursor, frames, flows)?;
    let fused = match (arch.fusion, fea_flow) {
        (FusionMode::Gated, Some(m)) => gated_fusion(tape, fea_frame, m)?,
        (FusionMode::Additive, Some(m)) => tape.add(fea_frame, m)?,
        _ => fea_frame,
    };
    let prediction = decode_inner(tape, arch, &mut cursor, fused, &skips)?;
    Ok(ForwardVars {
        fea_frame,
        fea_flow,
        skips,
        fused,
        prediction,
    })
}

/// Model-ready tensors stacked from a batch of cubes.
pub struct StcBatch<T> {
    /// `[N, t, P, P]`
    pub frames: Tensor<T>,
    /// `[N, 2t, P, P]`
    pub flows: Tensor<T>,
    /// `[N, 1, P, P]`
    pub target: Tensor<T>,
}

impl<T: Scalar> StcBatch<T> {
    pub fn from_stcs(stcs: &[&Stc]) -> Result<Self, ModelError> {
        let first = stcs.first().ok_or_else(|| ModelError::InvalidInput("empty batch".into()))?;
        let (t, p) = (first.window(), first.patch());
        let n = stcs.len();
        let mut frames = Vec::with_capacity(n * t * p * p);
        let mut flows = Vec::with_capacity(n * 2 * t * p * p);
        let mut target = Vec::with_capacity(n * p * p);
        let cast = |v: &f32| T::of(*v as f64);
        for s in stcs {
            if s.window() != t || s.patch() != p {
                return Err(ModelError::InvalidInput(format!(
                    "mixed cube geometry in batch: t={} P={} vs t={t} P={p}",
                    s.window(),
                    s.patch()
                )));
            }
            frames.extend(s.input_frames().iter().map(cast));
            flows.extend(s.flows.data().iter().map(cast));
            target.extend(s.target().iter().map(cast));
        }
        Ok(Self {
            frames: Tensor::new(vec![n, t, p, p], frames)?,
            flows: Tensor::new(vec![n, 2 * t, p, p], flows)?,
            target: Tensor::new(vec![n, 1, p, p], target)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{FusionMode, ModelParams};
    use super::*;

    fn small_arch(fusion: FusionMode) -> Architecture {
        Architecture {
            window: 2,
            patch: 8,
            channels: vec![3, 4],
            decoder_channels: vec![4, 3],
            fusion,
        }
    }

    fn run(
        params: &ModelParams,
        frames: Tensor<f32>,
        flows: Tensor<f32>,
    ) -> (Tape<f32>, ForwardVars) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
        let f = tape.constant(frames);
        let m = tape.constant(flows);
        let out = forward(&mut tape, &params.arch, &vars, f, Some(m)).unwrap();
        (tape, out)
    }

    fn inputs(n: usize, arch: &Architecture, seed: usize) -> (Tensor<f32>, Tensor<f32>) {
        let p = arch.patch;
        let f = Tensor::from_fn(&[n, arch.window, p, p], |i| (((i + seed) * 37) % 101) as f32 / 101.0);
        let m = Tensor::from_fn(&[n, 2 * arch.window, p, p], |i| (((i + seed) * 53) % 89) as f32 / 44.5 - 1.0);
        (f, m)
    }

    #[test]
    fn features_match_in_shape_and_are_nonnegative() {
        let arch = small_arch(FusionMode::Gated);
        let params = ModelParams::init(&arch, 3).unwrap();
        let (f, m) = inputs(2, &arch, 0);
        let (tape, out) = run(&params, f, m);
        let a = tape.value(out.fea_frame);
        let b = tape.value(out.fea_flow.unwrap());
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.shape(), &[2, 4, 2, 2]);
        assert!(a.data().iter().chain(b.data()).all(|&v| v >= 0.0));
        assert_eq!(tape.shape(out.prediction), &[2, 1, 8, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let arch = small_arch(FusionMode::Gated);
        let params = ModelParams::init(&arch, 3).unwrap();
        let p = arch.patch;
        let (tape, out) = run(&params, Tensor::zeros(&[1, 2, p, p]), Tensor::zeros(&[1, 4, p, p]));
        assert!(tape.value(out.fea_frame).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.fea_flow.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = small_arch(FusionMode::Gated);
        let params = ModelParams::init(&arch, 9).unwrap();
        let (f, m) = inputs(3, &arch, 1);
        let (t1, o1) = run(&params, f.clone(), m.clone());
        let (t2, o2) = run(&params, f, m);
        assert_eq!(t1.value(o1.prediction), t2.value(o2.prediction));
        assert_eq!(t1.value(o1.fea_frame), t2.value(o2.fea_frame));
    }

    #[test]
    fn zero_params_give_final_bias() {
        let arch = small_arch(FusionMode::Gated);
        let mut params = ModelParams::zeros(&arch).unwrap();
        params.get_mut("dec.out.bias").unwrap().data_mut()[0] = 0.37;
        let (f, m) = inputs(2, &arch, 4);
        let (tape, out) = run(&params, f, m);
        assert!(tape.value(out.prediction).data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn skips_are_live_paths() {
        let arch = small_arch(FusionMode::Gated);
        let params = ModelParams::init(&arch, 5).unwrap();
        let (f, m) = inputs(1, &arch, 2);
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
        let fv = tape.constant(f);
        let mv = tape.constant(m);
        let out = forward(&mut tape, &arch, &vars, fv, Some(mv)).unwrap();
        let base = tape.value(out.prediction).clone();
        for level in 0..arch.blocks() {
            let mut skips = out.skips.clone();
            skips[level] = tape.scale(skips[level], 2.0);
            let pred = decode(&mut tape, &arch, &vars, out.fused, &skips).unwrap();
            assert_ne!(tape.value(pred), &base, "doubling skip {level} had no effect");
        }
        let same = decode(&mut tape, &arch, &vars, out.fused, &out.skips).unwrap();
        assert_eq!(tape.value(same), &base);
    }

    #[test]
    fn frame_only_ignores_flow() {
        let arch = small_arch(FusionMode::FrameOnly);
        let params = ModelParams::init(&arch, 5).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
        let (f, _) = inputs(1, &arch, 0);
        let fv = tape.constant(f);
        let out = forward(&mut tape, &arch, &vars, fv, None).unwrap();
        assert!(out.fea_flow.is_none());
        assert_eq!(out.fused, out.fea_frame);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let arch = small_arch(FusionMode::Gated);
        let params = ModelParams::init(&arch, 5).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
        let f = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let m = tape.constant(Tensor::zeros(&[1, 4, 8, 8]));
        assert!(matches!(
            forward(&mut tape, &arch, &vars, f, Some(m)),
            Err(ModelError::InvalidInput(_))
        ));
        let f = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let m = tape.constant(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(forward(&mut tape, &arch, &vars, f, Some(m)).is_err());
    }

    #[test]
    fn gated_fusion_identities() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64 * 0.7 - 1.0));
        let zero = tape.constant(Tensor::zeros(&[1, 4]));
        let out = gated_fusion(&mut tape, f, zero).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        let two = tape.constant(Tensor::full(&[1, 4], 2.0));
        let out = gated_fusion(&mut tape, zero, two).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 1.0));
        let bad = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(gated_fusion(&mut tape, f, bad).is_err());
    }
}
