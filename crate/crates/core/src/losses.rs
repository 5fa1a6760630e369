//! Training objectives, built on the tape so every term is differentiable.

use serde::{Deserialize, Serialize};

use crate::numerics::{Axis, NumericsError, Scalar, Tape, Var};

/// Denominator guard for cosine similarity, shared with scoring.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub intensity: f64,
    pub gradient: f64,
    pub consistency: f64,
    pub model: f64,
}

impl LossWeights {
    /// Setting used for Ped2 and Avenue.
    pub const PED2_AVENUE: LossWeights = LossWeights {
        intensity: 1.0,
        gradient: 1.0,
        consistency: 1.0,
        model: 1.0,
    };

    pub const SHANGHAITECH: LossWeights = LossWeights {
        intensity: 1.0,
        gradient: 1.0,
        consistency: 10.0,
        model: 1.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("intensity", self.intensity),
            ("gradient", self.gradient),
            ("consistency", self.consistency),
            ("model", self.model),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("loss weight {name} = {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PED2_AVENUE
    }
}

/// Mean squared difference over every element.
pub fn intensity_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var, NumericsError> {
    let d = tape.sq_diff(pred, target)?;
    Ok(tape.mean(d))
}

/// Mean absolute difference of absolute spatial gradients, taken separately
/// along rows and columns (each averaged over its own valid positions) and
/// summed.
pub fn gradient_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var, NumericsError> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(NumericsError::ShapeMismatch {
            op: "gradient_loss",
            left: tape.shape(pred).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    let mut terms = Vec::with_capacity(2);
    for axis in [Axis::Rows, Axis::Cols] {
        let dp = tape.spatial_diff(pred, axis)?;
        let dt = tape.spatial_diff(target, axis)?;
        let (ap, at) = (tape.abs(dp), tape.abs(dt));
        let gap = tape.sub(ap, at)?;
        let gap = tape.abs(gap);
        terms.push(tape.mean(gap));
    }
    tape.add(terms[0], terms[1])
}

/// `1 - mean_n cos(a_n, b_n)`, each sample flattened.
pub fn consistency_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let cos = tape.cosine_similarity(a, b, COSINE_EPS)?;
    let m = tape.mean(cos);
    Ok(tape.affine(m, -1.0, 1.0))
}

/// Mean of squared entries over all given tensors (pass weights only).
pub fn weight_penalty<T: Scalar>(tape: &mut Tape<T>, weights: &[Var]) -> Result<Var, NumericsError> {
    let count: usize = weights.iter().map(|&w| tape.value(w).numel()).sum();
    if count == 0 {
        return Ok(tape.constant(crate::numerics::Tensor::scalar(T::zero())));
    }
    let mut acc: Option<Var> = None;
    for &w in weights {
        let sq = tape.square(w);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / count as f64))
}

/// Every term of the objective plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub intensity: Var,
    pub gradient: Var,
    /// `None` when the model has no flow stream.
    pub consistency: Option<Var>,
    pub model: Var,
    pub total: Var,
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    fea_frame: Var,
    fea_flow: Option<Var>,
    weight_vars: &[Var],
    weights: &LossWeights,
) -> Result<LossTerms, NumericsError> {
    let intensity = intensity_loss(tape, pred, target)?;
    let gradient = gradient_loss(tape, pred, target)?;
    let consistency = match fea_flow {
        Some(m) => Some(consistency_loss(tape, fea_frame, m)?),
        None => None,
    };
    let model = weight_penalty(tape, weight_vars)?;
    let mut total = tape.scale(intensity, weights.intensity);
    let g = tape.scale(gradient, weights.gradient);
    total = tape.add(total, g)?;
    if let Some(c) = consistency {
        let c = tape.scale(c, weights.consistency);
        total = tape.add(total, c)?;
    }
    let r = tape.scale(model, weights.model);
    total = tape.add(total, r)?;
    Ok(LossTerms {
        intensity,
        gradient,
        consistency,
        model,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn eval2(
        a: Tensor<f64>,
        b: Tensor<f64>,
        f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var, NumericsError>,
    ) -> f64 {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let out = f(&mut tape, va, vb).unwrap();
        tape.value(out).item()
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn intensity_trivial_cases() {
        let x = pseudo(&[2, 1, 4, 4], 1);
        assert_eq!(eval2(x.clone(), x, intensity_loss), 0.0);
        let ones = Tensor::full(&[2, 1, 4, 4], 1.0);
        let zeros = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(eval2(ones, zeros, intensity_loss), 1.0);
    }

    #[test]
    fn intensity_matches_loop() {
        let (p, t) = (pseudo(&[3, 1, 5, 6], 2), pseudo(&[3, 1, 5, 6], 3));
        let mut acc = 0.0;
        for i in 0..p.numel() {
            acc += (p.data()[i] - t.data()[i]).powi(2);
        }
        let want = acc / p.numel() as f64;
        assert!((eval2(p, t, intensity_loss) - want).abs() < 1e-12);
    }

    fn gradient_loop(p: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
        let s = p.shape();
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        let at = |x: &Tensor<f64>, k: usize, i: usize, j: usize| x.data()[(k * h + i) * w + j];
        let (mut rows, mut cols) = (0.0, 0.0);
        for k in 0..n {
            for i in 0..h {
                for j in 0..w {
                    if i > 0 {
                        let gp = (at(p, k, i, j) - at(p, k, i - 1, j)).abs();
                        let gt = (at(t, k, i, j) - at(t, k, i - 1, j)).abs();
                        rows += (gp - gt).abs();
                    }
                    if j > 0 {
                        let gp = (at(p, k, i, j) - at(p, k, i, j - 1)).abs();
                        let gt = (at(t, k, i, j) - at(t, k, i, j - 1)).abs();
                        cols += (gp - gt).abs();
                    }
                }
            }
        }
        rows / (n * (h - 1) * w) as f64 + cols / (n * h * (w - 1)) as f64
    }

    #[test]
    fn gradient_trivial_cases() {
        let x = pseudo(&[1, 1, 6, 6], 4);
        assert_eq!(eval2(x.clone(), x, gradient_loss), 0.0);
        let a = Tensor::full(&[1, 1, 6, 6], 0.2);
        let b = Tensor::full(&[1, 1, 6, 6], 0.9);
        assert_eq!(eval2(a, b, gradient_loss), 0.0);
    }

    #[test]
    fn gradient_step_edge_matches_loop() {
        let target = Tensor::from_fn(&[1, 1, 6, 8], |i| if i % 8 >= 4 { 1.0 } else { 0.0 });
        let flat = Tensor::full(&[1, 1, 6, 8], 0.5);
        let got = eval2(flat.clone(), target.clone(), gradient_loss);
        assert!(got > 0.0);
        // One jump of 1 per row over 6 * 7 column positions.
        assert!((got - 6.0 / 42.0).abs() < 1e-12);
        assert!((got - gradient_loop(&flat, &target)).abs() < 1e-12);
    }

    #[test]
    fn gradient_random_matches_loop() {
        let (p, t) = (pseudo(&[2, 1, 7, 5], 5), pseudo(&[2, 1, 7, 5], 6));
        let want = gradient_loop(&p, &t);
        assert!((eval2(p, t, gradient_loss) - want).abs() < 1e-12);
    }

    #[test]
    fn consistency_trivial_cases() {
        let a = pseudo(&[2, 8], 7);
        assert!(eval2(a.clone(), a, consistency_loss).abs() < 1e-6);
        let e0 = Tensor::from_fn(&[1, 4], |i| (i == 0) as u8 as f64);
        let e1 = Tensor::from_fn(&[1, 4], |i| (i == 1) as u8 as f64);
        assert_eq!(eval2(e0, e1, consistency_loss), 1.0);
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(eval2(z.clone(), z, consistency_loss), 1.0);
    }

    #[test]
    fn weight_penalty_is_mean_of_squares() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let r = weight_penalty(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(r).item(), 14.0 / 4.0);
    }

    #[test]
    fn zero_weights_annihilate() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(pseudo(&[1, 1, 4, 4], 8));
        let t = tape.constant(pseudo(&[1, 1, 4, 4], 9));
        let f = tape.constant(pseudo(&[1, 6], 10));
        let m = tape.constant(pseudo(&[1, 6], 11));
        let w = tape.constant(pseudo(&[3, 3], 12));
        let zero = LossWeights {
            intensity: 0.0,
            gradient: 0.0,
            consistency: 0.0,
            model: 0.0,
        };
        let terms = total_loss(&mut tape, p, t, f, Some(m), &[w], &zero).unwrap();
        assert_eq!(tape.value(terms.total).item(), 0.0);
        let terms = total_loss(&mut tape, p, t, f, Some(m), &[w], &LossWeights::SHANGHAITECH).unwrap();
        let v = |x: Var| tape.value(x).item();
        let want = v(terms.intensity) + v(terms.gradient) + 10.0 * v(terms.consistency.unwrap()) + v(terms.model);
        assert!((v(terms.total) - want).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let mut w = LossWeights::default();
        w.gradient = -1.0;
        assert!(w.validate().is_err());
        assert!(LossWeights::SHANGHAITECH.validate().is_ok());
    }

    proptest! {
        #[test]
        fn consistency_range_and_scale_invariance(
            a in prop::collection::vec(0.0f64..3.0, 12),
            b in prop::collection::vec(0.0f64..3.0, 12),
            c in 0.01f64..100.0,
        ) {
            let ta = Tensor::new(vec![2, 6], a).unwrap();
            let tb = Tensor::new(vec![2, 6], b.clone()).unwrap();
            let tc = Tensor::new(vec![2, 6], b.iter().map(|v| v * c).collect()).unwrap();
            let base = eval2(ta.clone(), tb, consistency_loss);
            prop_assert!((0.0..=2.0).contains(&base));
            let scaled = eval2(ta, tc, consistency_loss);
            prop_assert!((base - scaled).abs() < 1e-6);
        }

        #[test]
        fn total_is_linear_in_each_weight(k in 0.0f64..5.0) {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(pseudo(&[1, 1, 4, 4], 13));
            let t = tape.constant(pseudo(&[1, 1, 4, 4], 14));
            let f = tape.constant(pseudo(&[1, 6], 15));
            let m = tape.constant(pseudo(&[1, 6], 16));
            let one = LossWeights { intensity: 1.0, gradient: 0.0, consistency: 0.0, model: 0.0 };
            let scaled = LossWeights { intensity: k, ..one };
            let a = total_loss(&mut tape, p, t, f, Some(m), &[], &one).unwrap().total;
            let b = total_loss(&mut tape, p, t, f, Some(m), &[], &scaled).unwrap().total;
            prop_assert!((tape.value(b).item() - k * tape.value(a).item()).abs() < 1e-12);
        }
    }
}
