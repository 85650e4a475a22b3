use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

const REL_FLOOR: f64 = 1e-3;

/// Checks every entry of every input with step `h = 1e-4`.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &[Var<'g, S>]) -> Result<Var<'g, S>>,
{
    grad_check_with(f, inputs, 1e-4, tol, None)
}

/// As [`grad_check`], with explicit step and an optional cap on entries checked per input
/// (entries are then taken at an even stride, always including the first and last).
pub fn grad_check_with<S, F>(
    f: F,
    inputs: &[Tensor<S>],
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &[Var<'g, S>]) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_output(out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        scalar_output(f(&g, &vars)?)
    };
    compare(&analytic, inputs, eval, h, tol, max_entries)
}

/// As [`grad_check_with`] for a closure reading its weights from a [`ParamStore`],
/// differentiating with respect to the named parameters (all of them when `names` is empty).
pub fn grad_check_params<S, F>(
    f: F,
    params: &ParamStore<S>,
    names: &[&str],
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamStore<S>) -> Result<Var<'g, S>>,
{
    let names: Vec<String> = if names.is_empty() {
        params.names().map(str::to_string).collect()
    } else {
        names.iter().map(|n| n.to_string()).collect()
    };
    let inputs: Vec<Tensor<S>> = names
        .iter()
        .map(|n| params.get(n).cloned().ok_or_else(|| invalid!("unknown parameter {n:?}")))
        .collect::<Result<_>>()?;
    let g = Graph::new();
    let out = f(&g, params)?;
    scalar_output(out)?;
    let grads = g.backward(out)?.into_param_grads();
    let analytic: Vec<Tensor<S>> = names
        .iter()
        .zip(&inputs)
        .map(|(n, x)| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let mut store = params.clone();
        for (n, x) in names.iter().zip(xs) {
            store.insert(n.clone(), x.clone());
        }
        let g = Graph::inference();
        scalar_output(f(&g, &store)?)
    };
    compare(&analytic, &inputs, eval, h, tol, max_entries)
}

fn compare<S: Scalar>(
    analytic: &[Tensor<S>],
    inputs: &[Tensor<S>],
    eval: impl Fn(&[Tensor<S>]) -> Result<f64>,
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport> {
    for (i, a) in analytic.iter().enumerate() {
        if !a.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of input {i}")));
        }
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let indices: Vec<usize> = match max_entries {
            Some(cap) if cap < n && cap >= 2 => (0..cap).map(|j| j * (n - 1) / (cap - 1)).collect(),
            _ => (0..n).collect(),
        };
        for j in indices {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = S::of(orig.f64() + h);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = S::of(orig.f64() - h);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j].f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

fn scalar_output<S: Scalar>(out: Var<'_, S>) -> Result<f64> {
    let v = out.value();
    if v.numel() != 1 {
        return Err(invalid!("grad_check closure must be scalar-valued, got shape {:?}", v.shape()));
    }
    Ok(v.item().f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[3], &[2.0, 3.0, -4.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let w = g.constant(w.clone());
                Ok(v[0].mul(w)?.sum())
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_scalar_closure_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 1e-3).is_err());
    }
}
