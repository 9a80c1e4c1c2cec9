//! Central finite-difference check of analytic parameter gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `(row, col)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for [`relative_error`]. Central differences at
/// `h = 1e-5` carry round-off near `ε·|L|/h ≈ 1e-11` for unit-scale losses,
/// so gradients much below this floor cannot be resolved in relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// element of every trainable parameter.
///
/// `loss_fn(params, with_grad)` must return the loss and, when `with_grad`
/// is set, the accumulated parameter gradients.
pub fn grad_check<F>(params: &ParamStore, h: f64, mut loss_fn: F) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<ParamGrads>)>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    let (base, grads) = loss_fn(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss(base));
    }
    let grads = grads.ok_or_else(|| Error::Precondition("loss_fn returned no gradients".into()))?;

    let mut work = params.clone();
    let mut reports = Vec::new();
    for (id, p) in params.iter() {
        if p.frozen {
            continue;
        }
        let cols = p.value.cols();
        let mut report = GradCheckReport {
            name: p.name.clone(),
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let (plus, _) = loss_fn(&work, false)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let (minus, _) = loss_fn(&work, false)?;
            work.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error || i == 0 {
                report.max_rel_error = err;
                report.worst = (i / cols, i % cols);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
