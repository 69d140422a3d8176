//! Central finite-difference checks of tape gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Comparison of analytic and numeric gradients for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub param: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub entries_checked: usize,
}

/// Perturbs each entry of the named parameters by `±step`, re-evaluates the
/// scalar built by `loss`, and compares `(f(θ+h) − f(θ−h)) / 2h` with the
/// gradient from [`Graph::backward`].
///
/// `loss` receives the (possibly perturbed) store and must build the whole
/// forward pass on the fresh graph it is given.
pub fn check_gradients<F>(
    store: &ParamStore,
    names: &[&str],
    step: f64,
    loss: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);

    let mut probe = store.clone();
    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = loss(&mut g, probe)?;
        Ok(g.scalar(out))
    };

    let mut reports = Vec::new();
    for &name in names {
        let base = store.require(name)?.clone();
        let a = analytic.get(name).ok_or_else(|| {
            Error::Internal(format!("`{name}` was not used by the loss"))
        })?;
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for (idx, &orig) in base.indexed_iter() {
            probe.get_mut(name).unwrap()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = a[idx];
            diff_sq += (analytic - numeric).powi(2);
            a_sq += analytic * analytic;
            n_sq += numeric * numeric;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt());
        reports.push(GradCheckReport {
            param: name.to_string(),
            rel_error: if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom },
            analytic_norm: a_sq.sqrt(),
            entries_checked: base.len(),
        });
    }
    Ok(reports)
}
