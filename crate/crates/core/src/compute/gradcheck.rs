//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{ClsrError, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let (worst_coordinate, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    }
}

fn eval_scalar(f: &impl Fn(&mut Graph, Var) -> Var, x: Tensor, coord: usize) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    let value = g.scalar(out);
    if !value.is_finite() {
        return Err(ClsrError::GradCheck(format!(
            "function is not finite when perturbing coordinate {coord}"
        )));
    }
    Ok(value)
}

/// Compares reverse-mode gradients of scalar `f` at `point` with central differences.
pub fn grad_check(f: impl Fn(&mut Graph, Var) -> Var, point: &Tensor, eps: f64) -> Result<GradCheckReport> {
    grad_check_against(&f, &f, point, eps)
}

/// Reverse-mode gradients of `analytic` against central differences of `reference`.
///
/// Used where the differentiated path intentionally differs from the forward
/// value (straight-through estimators, stop-gradient baselines).
pub fn grad_check_against(
    analytic: impl Fn(&mut Graph, Var) -> Var,
    reference: impl Fn(&mut Graph, Var) -> Var,
    point: &Tensor,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let out = analytic(&mut g, x);
    let base = g.scalar(out);
    if !base.is_finite() {
        return Err(ClsrError::GradCheck("function is not finite at the base point".into()));
    }
    let grads = g.backward(out);
    let a: Vec<f64> = match grads.wrt(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };
    let mut n = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fp = eval_scalar(&reference, plus, i)?;
        let fm = eval_scalar(&reference, minus, i)?;
        n.push((fp - fm) / (2.0 * eps));
    }
    Ok(compare(a, n))
}

/// Gradient check over parameter coordinates. `f` builds a scalar loss from the store.
pub fn grad_check_params(
    store: &ParamStore,
    params: &[ParamId],
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    if !g.scalar(out).is_finite() {
        return Err(ClsrError::GradCheck("function is not finite at the base point".into()));
    }
    let grads = g.backward(out).param_grads(&g);
    let mut analytic = Vec::new();
    for &id in params {
        match grads.iter().find(|(p, _)| *p == id) {
            Some((_, t)) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, store.value(id).len())),
        }
    }
    drop(g);
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut coord = 0;
    for &id in params {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + delta;
                let mut g = Graph::new();
                let out = f(&mut g, &work);
                let v = g.scalar(out);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ClsrError::GradCheck(format!(
                        "function is not finite when perturbing {}[{i}]",
                        store.param(id).name
                    )))
                }
            };
            let fp = eval(eps)?;
            let fm = eval(-eps)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * eps));
            coord += 1;
        }
    }
    debug_assert_eq!(coord, analytic.len());
    Ok(compare(analytic, numeric))
}
