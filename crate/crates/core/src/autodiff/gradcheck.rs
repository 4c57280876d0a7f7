use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding compare on an absolute scale instead of dividing by ~0.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(parameter index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Checks the gradients of the scalar built by `f` against central
/// differences `(f(p+h) − f(p−h)) / 2h`, element by element.
///
/// `f` receives one graph node per entry of `params`, in order.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let mut store = ParamStore::new();
    let ids = params
        .iter()
        .enumerate()
        .map(|(i, p)| store.add(format!("p{i}"), p.clone()))
        .collect::<Result<Vec<_>>>()?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(store, id)).collect();
        let root = f(&mut g, &nodes)?;
        if !g.value(root).is_scalar() {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(g.value(root).item())
    };

    let analytic = {
        let mut g = Graph::new();
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let root = f(&mut g, &nodes)?;
        g.backward(root)?
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: tol,
        passed: true,
    };
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for e in 0..n {
            let original = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = original + h;
            let plus = eval(&store)?;
            store.get_mut(id).data_mut()[e] = original - h;
            let minus = eval(&store)?;
            store.get_mut(id).data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(grad[e], numeric);
            report.checked += 1;
            report.max_absolute_error = report.max_absolute_error.max((grad[e] - numeric).abs());
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    report.passed = report.max_relative_error.is_finite() && report.max_relative_error < tol;
    Ok(report)
}
