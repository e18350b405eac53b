//! Central finite-difference verification of analytic gradients.

use super::params::{Grads, ParamStore};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failed: usize,
    pub max_rel_error: f64,
    /// `(param name, flat index, analytic, numeric)` of each failure.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0 && self.checked > 0
    }
}

/// Perturbs every scalar of `store` by `±h` and compares `(L(p+h) − L(p−h))/2h`
/// against `analytic`. A scalar passes when the relative error is within
/// `rel_tol` or the absolute difference is within `abs_tol`, which absorbs
/// rounding noise of the difference quotient on near-zero gradients.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &Grads,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for p in 0..store.len() {
        for k in 0..store.get(p).data.len() {
            let orig = store.get(p).data[k];
            store.get_mut(p).data[k] = orig + h;
            let up = loss(store);
            store.get_mut(p).data[k] = orig - h;
            let down = loss(store);
            store.get_mut(p).data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.mats[p].data[k];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { (a - numeric).abs() / scale } else { 0.0 };
            report.checked += 1;
            let ok = rel <= rel_tol || (a - numeric).abs() <= abs_tol;
            if (a - numeric).abs() > abs_tol {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if !ok {
                report.failed += 1;
                report.failures.push((store.params[p].name.clone(), k, a, numeric));
            }
        }
    }
    report
}
