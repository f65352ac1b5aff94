//! Central-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective {
    fn value(&self, store: &ParamStore) -> Result<f64>;
    fn value_and_grad(&self, store: &ParamStore) -> Result<(f64, Gradients)>;
}

impl<F> Objective for F
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    fn value(&self, store: &ParamStore) -> Result<f64> {
        self(store).map(|(v, _)| v)
    }

    fn value_and_grad(&self, store: &ParamStore) -> Result<(f64, Gradients)> {
        self(store)
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude seen for this parameter.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient of `objective` at `point` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter.
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    point: &ParamStore,
    step: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Argument(format!(
            "step must be positive, got {step}"
        )));
    }
    let (_, analytic) = objective.value_and_grad(point)?;
    let mut probe = point.clone();
    let mut params = Vec::with_capacity(point.len());
    for id in point.ids() {
        let name = point.get(id).name.clone();
        let mut check = ParamCheck {
            name,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for k in 0..point.value(id).numel() {
            let orig = point.value(id).data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + step;
            let plus = objective.value(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - step;
            let minus = objective.value(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite objective perturbing `{}`[{k}]",
                    check.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[k];
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}
