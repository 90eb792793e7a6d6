//! Central finite-difference gradient checking.

use crate::error::AutodiffError;
use crate::graph::{Graph, OpKind, Var};
use crate::store::ParameterStore;

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst element, empty if nothing was checked.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients against central differences for every
/// element of every parameter.
///
/// `loss_fn` records a scalar loss on the supplied graph and must be
/// deterministic given the parameter values; any sampling noise has to be
/// drawn from a fixed seed inside the closure. `faults` are injected into
/// the graph used for the analytic pass only.
pub fn finite_difference_check<E, F>(
    params: &ParameterStore,
    eps: f64,
    faults: &[(OpKind, f64)],
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var, E>,
{
    let mut store = params.clone();
    store.zero_grad();
    let mut graph = Graph::new();
    for &(k, f) in faults {
        graph.inject_fault(k, f);
    }
    let loss = loss_fn(&mut graph, &store)?;
    let value = graph.item(loss);
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(value).into());
    }
    graph.backward_into(loss, &mut store)?;

    let mut eval = |store: &ParameterStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        let v = g.item(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteLoss(v).into())
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = params.clone();
    for name in names {
        let analytic = store
            .get(&name)
            .and_then(|t| t.grad())
            .map(<[f64]>::to_vec)
            .unwrap_or_default();
        let original = probe.get(&name).expect("cloned store").data().to_vec();
        for (idx, &a) in analytic.iter().enumerate() {
            let mut bumped = original.clone();
            bumped[idx] = original[idx] + eps;
            probe.set_values(&name, &bumped)?;
            let plus = eval(&probe)?;
            bumped[idx] = original[idx] - eps;
            probe.set_values(&name, &bumped)?;
            let minus = eval(&probe)?;
            probe.set_values(&name, &original)?;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
