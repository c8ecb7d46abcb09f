//! Central finite-difference oracle for reverse-mode gradients.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// `(name[index], analytic, numeric)` for every coordinate, in store order.
    pub coordinates: Vec<(String, f64, f64)>,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(f: &F, target: &T) -> Result<f64>
where
    F: Fn(&mut Graph, &T) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, target)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("finite_diff_check", "f", format!("{:?}", v.shape()), "a scalar"));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {y}")));
    }
    Ok(y)
}

/// Compares backward's gradient of `f` against `(f(θ+eps·e) - f(θ-eps·e)) / 2eps`
/// for every coordinate of every parameter in `store`.
///
/// `f` must be deterministic; it is evaluated on inference graphs.
/// Gradients already in `store` are cleared.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_in(store, |s| s, eps, f)
}

/// [`finite_diff_check`] over the parameters reached through `store_of`, for
/// objectives such as a model's loss that read parameters from their owner.
pub fn finite_diff_check_in<T, S, F>(target: &mut T, store_of: S, eps: f64, f: F) -> Result<GradCheckReport>
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: Fn(&mut Graph, &T) -> Result<Var>,
{
    store_of(target).zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, target)?;
    g.backward(out, store_of(target))?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        coordinates: Vec::new(),
    };
    let ids: Vec<_> = store_of(target).ids().collect();
    for id in ids {
        for j in 0..store_of(target).get(id).value.numel() {
            let orig = store_of(target).get(id).value.data()[j];
            store_of(target).get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = evaluate(&f, target);
            store_of(target).get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = evaluate(&f, target);
            store_of(target).get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let p = store_of(target).get(id);
            let analytic = p.grad[j];
            let err = relative_error(analytic, numeric);
            let label = format!("{}[{j}]", p.name);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err;
                report.worst = label.clone();
                report.analytic = analytic;
                report.numeric = numeric;
            }
            report.coordinates.push((label, analytic, numeric));
        }
    }
    Ok(report)
}
