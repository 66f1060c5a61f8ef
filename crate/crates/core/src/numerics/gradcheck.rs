use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on checked entries per parameter; entries are taken at an
    /// even stride so every region of a large tensor is visited.
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries_per_param: usize::MAX,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// finite differences for every entry of `params`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            opts.eps
        )));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        check_finite(g.value(out).item(), "forward")?;
        g.backward(out)
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.value(out).item();
        check_finite(v, "perturbed forward")?;
        Ok(v)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: None,
        worst_index: 0,
    };
    for &id in params {
        let len = store.get(id).len();
        let stride = len.div_ceil(opts.max_entries_per_param.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            check_finite(a, "analytic gradient")?;

            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst_param.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst_param = Some(store.param(id).name.clone());
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced {v}")))
    }
}
