use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` of the worst disagreement.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar `f` at `params`.
///
/// `f` builds its graph on the provided tape from the parameter vars, in the
/// same order as `params`, and returns the loss var.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item().to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::GradCheck(format!("non-finite objective {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::GradCheck("non-finite objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        passed: true,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + S::lit(step);
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - S::lit(step);
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[ei].to_f64().unwrap_or(f64::NAN);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
