//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Magnitude below which gradient differences are compared absolutely.
///
/// Central differences of an O(1) objective at `eps = 1e-5` carry roughly
/// `1e-11` of rounding noise, so smaller reference magnitudes would report
/// noise as error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new(params);
    let out = f(&g)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check objective must be scalar, got {} elements",
            v.numel()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the reverse-mode gradient of the scalar `f` against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every element of every trainable
/// parameter and reports the worst relative error.
pub fn grad_check<F>(params: &mut ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
{
    grad_check_sampled(params, eps, usize::MAX, f)
}

/// [`grad_check`] restricted to at most `per_tensor` evenly spaced elements
/// of each parameter.
pub fn grad_check_sampled<F>(params: &mut ParamSet, eps: f64, per_tensor: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let g = Graph::new(params);
        let out = f(&g)?;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check objective must be scalar, got {} elements",
                out.numel()
            )));
        }
        g.backward(out)?.into_param_grads()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).requires_grad {
            continue;
        }
        let n = params.value(id).numel();
        let k = n.min(per_tensor.max(1));
        for i in (0..k).map(|j| j * n / k) {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(params, &f);
            params.value_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(params, &f);
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
