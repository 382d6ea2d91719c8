//! Central-difference gradient checking.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Relative error used by every check: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares `analytic` against central differences of `f` at `x`, over
/// `coords` (all coordinates when `None`). Returns the max relative error.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape("analytic gradient length"));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = finite(f(&probe)?)?;
        probe[i] = orig - eps;
        let minus = finite(f(&probe)?)?;
        probe[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Gradient check for a scalar objective built on a tape from parameters.
///
/// Up to `per_tensor` evenly spaced coordinates of every parameter in
/// `ids` (all parameters when `None`) are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    objective: F,
    eps: f64,
    per_tensor: usize,
    ids: Option<&[ParamId]>,
) -> Result<ParamCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(store, &mut tape)?;
    tape.backward(out)?;
    let grads = tape.param_grads(store);
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let o = objective(s, &mut t)?;
        Ok(t.value(o).data()[0])
    };
    let mut probe = store.clone();
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let step = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(step).take(per_tensor) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = finite(eval(&probe)?)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = finite(eval(&probe)?)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let err = relative_error(analytic[i], (plus - minus) / (2.0 * eps));
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", store.entry(id).name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x = [0.3, -1.7, 2.5, 0.0];
        let f = |p: &[f64]| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>());
        let err = grad_check(f, &x, &x, 1e-5, None).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let f = |p: &[f64]| Ok(p[0] * p[1]);
        assert!(grad_check(f, &x, &[2.0, 5.0], 1e-5, None).unwrap() > 0.5);
    }

    #[test]
    fn non_finite_objective_propagates() {
        let f = |p: &[f64]| Ok(1.0 / (p[0] - 1.0 + 1e-5).max(0.0));
        assert!(matches!(grad_check(f, &[1.0 - 1e-5], &[0.0], 1e-5, None), Err(Error::NonFinite(_))));
    }
}
