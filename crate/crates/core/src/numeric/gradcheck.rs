use crate::error::{Error, Result};
use crate::numeric::params::{BoundParams, ParamStore};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite evaluation {value} at {what}")))
    }
}

/// Max relative error between the tape gradient of `f` at `point` and a
/// central difference with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Domain(format!("grad_check step {eps} must be positive")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_requires_grad(true));
    let out = f(&mut tape, x)?;
    finite(tape.scalar(out), "point")?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(point.shape().to_vec(), values)?;
        let x = tape.leaf(&t);
        let out = f(&mut tape, x)?;
        finite(tape.scalar(out), "perturbed point")
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.values().to_vec();
        plus[i] += eps;
        let mut minus = point.values().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

/// Finite-difference check of `loss` against every trainable coordinate of
/// `params` (at most `max_per_tensor` evenly spaced coordinates per tensor).
pub fn grad_check_params<F>(
    loss: F,
    params: &ParamStore,
    eps: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = loss(&mut tape, &bound)?;
    finite(tape.scalar(out), "point")?;
    let grads = tape.backward(out)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let out = loss(&mut tape, &bound)?;
        finite(tape.scalar(out), "perturbed point")
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        if !tensor.requires_grad() {
            continue;
        }
        let var = bound.get(name)?;
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let n = tensor.numel();
        let stride = max_per_tensor.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride.max(1)) {
            let original = tensor.values()[i];
            probe.get_mut(name).unwrap().values_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().values_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = i;
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
