//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::TensorError;

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, over every coordinate of every parameter.
pub fn finite_difference_check<F, E>(f: F, params: &ParamSet, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_difference_check_where(f, params, h, |_| true)
}

/// Like [`finite_difference_check`], restricted to parameters accepted by `select`.
pub fn finite_difference_check_where<F, E>(
    f: F,
    params: &ParamSet,
    h: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, E>,
    E: From<TensorError>,
{
    if h <= 0.0 || h.is_nan() {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| true)?;
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64, E> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |_| false)?;
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        if !select(name) {
            continue;
        }
        let analytic = grads.get(name).expect("every bound param has a gradient");
        for idx in 0..value.numel() {
            let original = value.data()[idx];
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    Ok(report)
}
