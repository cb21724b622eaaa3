//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rtol: 1e-3,
            atol: 1e-6,
        }
    }
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_abs_diff: f64,
    pub worst_rel_diff: f64,
    pub worst_param: String,
}

/// Compare every parameter's populated analytic gradient against central
/// finite differences of `loss` with step `h`. The caller runs
/// forward/backward first; `loss` must re-evaluate the loss without
/// recording (a disabled tape) at the parameters' current values.
///
/// An element passes when `|a - n| <= max(rtol * max(|a|, |n|), atol)`.
pub fn check_params<T, F>(
    params: &[(String, Tensor<T>)],
    h: f64,
    tol: Tolerance,
    mut loss: F,
) -> Result<GradCheckReport>
where
    T: Dtype,
    F: FnMut() -> Result<T>,
{
    let mut report = GradCheckReport::default();
    for (name, p) in params {
        let analytic = p.grad().ok_or_else(|| {
            Error::Autodiff(format!("parameter {} has no gradient to check", name))
        })?;
        for i in 0..p.len() {
            p.nudge(i, T::c(h));
            let up = loss()?.f64();
            p.nudge(i, T::c(-2.0 * h));
            let down = loss()?.f64();
            p.nudge(i, T::c(h));
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].f64();
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            if diff > report.worst_abs_diff {
                report.worst_abs_diff = diff;
            }
            if rel > report.worst_rel_diff && diff > tol.atol {
                report.worst_rel_diff = rel;
                report.worst_param = format!("{}[{}]", name, i);
            }
            if diff > (tol.rtol * scale).max(tol.atol) {
                return Err(Error::Autodiff(format!(
                    "gradient mismatch at {}[{}]: analytic {} vs finite-difference {} \
                     (|diff| {} > tol)",
                    name, i, a, numeric, diff
                )));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
