//! Central finite-difference verification of analytic gradients.

use rayon::prelude::*;
use serde::Serialize;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERR_FLOOR.max(analytic.abs() + numeric.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares the gradients stored in `params` against central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` of `loss_fn` for every scalar entry.
///
/// `loss_fn` must be deterministic (dropout off or masks frozen). The store
/// is restored bit-exactly before returning.
pub fn check_gradients<T, F>(
    loss_fn: F,
    params: &ParamStore<T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&ParamStore<T>) -> Result<T> + Sync,
{
    check_gradients_by(|p, _| loss_fn(p), params, eps, tol)
}

/// [`check_gradients`] with a loss that is also told which tensor differs
/// from `params`, so it can reuse activations that tensor cannot affect.
/// Called with the unperturbed store, `loss_fn` must give the same value
/// for every id.
pub fn check_gradients_by<T, F>(
    loss_fn: F,
    params: &ParamStore<T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&ParamStore<T>, ParamId) -> Result<T> + Sync,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-4]")));
    }
    let jobs: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).len()).map(move |k| (id, k)))
        .collect();
    if let Some(&(id, _)) = jobs.first() {
        if !loss_fn(params, id)?.is_finite() {
            return Err(Error::NonFinite("loss at unperturbed parameters".into()));
        }
    }

    let numeric: Vec<Result<f64>> = jobs
        .par_iter()
        .map_init(
            || params.clone(),
            |local, &(id, k)| {
                let orig = local.value(id).data()[k];
                let h = T::lit(eps);
                local.value_mut(id).data_mut()[k] = orig + h;
                let plus = loss_fn(local, id);
                local.value_mut(id).data_mut()[k] = orig - h;
                let minus = loss_fn(local, id);
                local.value_mut(id).data_mut()[k] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss while perturbing {}[{k}]",
                        local.name(id)
                    )));
                }
                Ok((plus.as_f64() - minus.as_f64()) / (2.0 * eps))
            },
        )
        .collect();

    let mut tensors: Vec<TensorCheck> = params
        .entries()
        .iter()
        .map(|e| TensorCheck {
            name: e.name.clone(),
            entries: e.value.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    for (&(id, k), num) in jobs.iter().zip(numeric) {
        let num = num?;
        let ana = params.grad(id).data()[k].as_f64();
        let err = relative_error(ana, num);
        let t = &mut tensors[id.index()];
        if err > t.max_rel_err || (k == 0 && t.max_rel_err == 0.0) {
            t.max_rel_err = err;
            t.worst_index = k;
            t.analytic = ana;
            t.numeric = num;
        }
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        tol,
        tensors,
        max_rel_err,
        passed: max_rel_err < tol,
    })
}
