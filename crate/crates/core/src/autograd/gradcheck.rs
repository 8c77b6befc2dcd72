//! Central-difference gradient oracle.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `params`.
///
/// The listed parameters are treated as trainable for the duration of the
/// check; their flags and values are restored afterwards.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    run(store, params, step, false, f)
}

#[doc(hidden)]
pub fn grad_check_corrupted<F>(store: &mut ParamStore, params: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    run(store, params, step, true, f)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let root = f(&mut g)?;
    let v = g
        .value(root)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(g.shape(root).to_vec()))?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("f = {v}")));
    }
    Ok(v)
}

fn run<F>(store: &mut ParamStore, params: &[ParamId], step: f64, corrupt: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let flags: Vec<bool> = params.iter().map(|&p| store.is_trainable(p)).collect();
    for &p in params {
        store.set_trainable(p, true);
    }
    let analytic = {
        let mut g = Graph::new(store);
        if corrupt {
            g = g.with_corrupted_backward();
        }
        let root = f(&mut g)?;
        if !g.value(root).all_finite() {
            return Err(Error::Evaluation("f is not finite at θ".into()));
        }
        g.backward(root)?
    };
    for (&p, &t) in params.iter().zip(&flags) {
        store.set_trainable(p, t);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &p in params {
        let numel = store.value(p).numel();
        for k in 0..numel {
            let orig = store.value(p).data()[k];
            store.value_mut(p).data_mut()[k] = orig + step;
            let plus = evaluate(store, &f);
            store.value_mut(p).data_mut()[k] = orig - step;
            let minus = evaluate(store, &f);
            store.value_mut(p).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic.get(p).map_or(0.0, |g| g.data()[k]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = Some(store.get(p).name.clone());
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
