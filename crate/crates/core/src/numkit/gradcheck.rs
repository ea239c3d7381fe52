use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(p + h e_i) − f(p − h e_i)) / 2h` on every coordinate.
///
/// The per-coordinate error is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = loss_fn(params);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }

    let mut probe = params.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = loss_fn(&probe).0;
        probe[i] = params[i] - step;
        let minus = loss_fn(&probe).0;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}
