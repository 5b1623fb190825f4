use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Checks the tape gradient of a scalar function against central differences
/// `(f(x+h) - f(x-h)) / 2h` at every coordinate of every input.
///
/// `f` receives a fresh tape and one leaf per input (all requiring grad) and
/// must return a scalar. Relative error is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`; the floor keeps roundoff in
/// the difference quotient (~1e-11 for O(1) losses) from dominating at
/// coordinates whose true gradient is zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Config(
                "grad_check function must return a scalar".into(),
            ));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::Numeric {
                stage: "grad_check evaluation".into(),
            });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric {
            stage: "grad_check evaluation".into(),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        passed: true,
    };
    let mut values = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
