//! Central finite differences against reverse-mode gradients, in `f64`.

use std::sync::Arc;

use crate::error::Result;
use crate::param::Param;
use crate::Tensor;

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, floor)` over all checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Checks `d f / d p` for every coordinate of every parameter in `params`.
///
/// `f` must rebuild the computation from the parameters' current values on every call.
/// `floor` keeps the relative error meaningful for near-zero gradients.
pub fn check_gradients<F>(
    params: &[Arc<Param<f64>>],
    f: F,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let grads = f()?.backward()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for p in params {
        let base = p.data().as_ref().clone();
        let analytic: Vec<f64> = match grads.get(p.id()) {
            Some(g) => g.to_vec(),
            None => vec![0.0; base.len()],
        };
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.set_data(plus)?;
            let fp = f()?.item()?;
            let mut minus = base.clone();
            minus[i] -= step;
            p.set_data(minus)?;
            let fm = f()?.item()?;
            p.set_data(base.clone())?;
            let numeric = (fp - fm) / (2.0 * step);
            let abs = (numeric - analytic[i]).abs();
            let rel = abs / numeric.abs().max(analytic[i].abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
