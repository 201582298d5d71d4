//! Central finite-difference verification of analytic gradients (64-bit).

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter tensor (evenly spaced).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-4,
            max_entries: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Compares backprop gradients of `loss` with respect to `ids` against
/// central differences.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>) -> Result<Var>,
{
    let g = Graph::with_params(store);
    let l = loss(&g)?;
    let grads = g.backward(l)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let step = n.div_ceil(opts.max_entries.max(1)).max(1);
        for idx in (0..n).step_by(step) {
            let orig = store.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + opts.eps;
            let gp = Graph::with_params(&work);
            let lp = scalar(&gp, loss(&gp)?);
            work.get_mut(id).data_mut()[idx] = orig - opts.eps;
            let gm = Graph::with_params(&work);
            let lm = scalar(&gm, loss(&gm)?);
            work.get_mut(id).data_mut()[idx] = orig;

            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(GradMismatch {
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Every parameter id of a store.
pub fn all_ids<T: crate::tensor::Real>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.ids().collect()
}
