//! Central finite-difference validation of tape gradients, in `f64`.

use super::{NumericsError, Tape, Tensor, Var};

/// Step used by the checker unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Relative tolerance used by the checker unless a caller overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error, so entries whose analytic and
/// numeric gradients are both ~0 compare in absolute terms.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Largest relative error over the entries that stayed on one linear
    /// piece of every kink.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Entries whose `±h` stencil crosses a ReLU/abs kink; their central
    /// differences do not estimate a derivative and are excluded.
    pub nondifferentiable: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> usize {
        self.params.iter().map(|p| p.nondifferentiable.len()).sum()
    }
}

/// Compares the analytic gradient of a scalar objective against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, one parameter entry at a time.
///
/// `build` receives a fresh tape and the leaf variables for `params` (in
/// order) and must return a one-element output.
pub fn finite_diff_check<F>(
    build: F,
    params: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(NumericsError::NotScalar(tape.shape(out).to_vec()));
        }
        Ok((tape, out, vars))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, out, vars) = eval(&values)?;
    let base_signature = tape.kink_signature();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let non_finite = |what: &str| NumericsError::NonFinite {
            name: format!("{name} ({what})"),
        };
        let analytic = match grads.get(vars[pi]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tensor.shape()),
        };
        if !analytic.all_finite() {
            return Err(non_finite("analytic gradient"));
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            nondifferentiable: Vec::new(),
        };
        for i in 0..tensor.numel() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + step;
            let (tp, op, _) = eval(&values)?;
            values[pi].data_mut()[i] = orig - step;
            let (tm, om, _) = eval(&values)?;
            values[pi].data_mut()[i] = orig;

            let (fp, fm) = (tp.value(op).item(), tm.value(om).item());
            if !fp.is_finite() || !fm.is_finite() {
                return Err(non_finite("objective"));
            }
            if tp.kink_signature() != base_signature || tm.kink_signature() != base_signature {
                check.nondifferentiable.push(i);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            check.checked += 1;
            if rel > check.max_rel_error || check.worst_index.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst_index = Some(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str, data: &[f64]) -> (String, Tensor<f64>) {
        (name.into(), Tensor::new(vec![data.len()], data.to_vec()).unwrap())
    }

    #[test]
    fn quadratic_is_exact() {
        let report = finite_diff_check(
            |tape, v| {
                let sq = tape.square(v[0]);
                Ok(tape.sum(sq))
            },
            &[p("theta", &[1.0, 2.0])],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-6);
        assert_eq!(report.params[0].checked, 2);
    }

    #[test]
    fn abs_at_zero_is_flagged() {
        let report = finite_diff_check(
            |tape, v| {
                let a = tape.abs(v[0]);
                Ok(tape.sum(a))
            },
            &[p("theta", &[0.0])],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.params[0].nondifferentiable, vec![0]);
        assert_eq!(report.flagged(), 1);
        assert_eq!(report.params[0].checked, 0);
    }

    #[test]
    fn wrong_gradient_fails() {
        // x * x built as mul of a leaf with a detached copy: analytic
        // gradient sees only one factor.
        let report = finite_diff_check(
            |tape, v| {
                let copy = tape.constant(tape.value(v[0]).clone());
                let m = tape.mul(v[0], copy)?;
                Ok(tape.sum(m))
            },
            &[p("theta", &[1.5])],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_objective_is_a_hard_failure() {
        let err = finite_diff_check(
            |tape, v| {
                let s = tape.scale(v[0], f64::INFINITY);
                Ok(tape.sum(s))
            },
            &[p("weights", &[1.0])],
            1e-3,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
    }
}
