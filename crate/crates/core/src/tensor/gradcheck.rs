use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients against central differences
/// `(f(x + h) - f(x - h)) / 2h` at every coordinate of every parameter.
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `loss` returns the loss and its analytic gradients, one tensor per
/// parameter, for the parameter values it is given.
pub fn grad_check<F>(params: &[Tensor2], h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor2]) -> Result<(f64, Vec<Tensor2>)>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    if params.is_empty() {
        return Ok(report);
    }
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::invalid("loss returned the wrong number of gradients"));
    }
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Shape {
                op: "grad_check",
                lhs: params[pi].shape(),
                rhs: grad.shape(),
            });
        }
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let (plus, _) = loss(&probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let (minus, _) = loss(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, ei));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
