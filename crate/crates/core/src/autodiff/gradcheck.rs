//! Central finite-difference gradient checking.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MIN_EPS: f64 = 1e-6;
pub const MAX_EPS: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub eps: f64,
    pub params: Vec<ParamError>,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn worst_param(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// for every coordinate of every named parameter.
///
/// `loss_fn` receives a fresh graph and the parameter leaves (in the order of
/// `params`) and must return a scalar loss. Perturbed evaluations pin every
/// `stop_gradient` output to its unperturbed value.
pub fn grad_check<F>(params: &[(String, Tensor)], eps: f64, mut loss_fn: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Error::Contract(format!(
            "eps {eps:e} outside the sanctioned range [{MIN_EPS:e}, {MAX_EPS:e}]"
        )));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::recording_stop_gradients();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let detached = g.recorded_stop_gradients().to_vec();
    let base = g.value(loss).item();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying_stop_gradients(detached.clone());
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let again = eval(&values)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "loss function is not deterministic: {base} vs {again}"
        )));
    }

    let mut report = GradReport {
        eps,
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let mut entry = ParamError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..values[p].numel() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let err = relative_error(a, numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
            report.coordinates += 1;
        }
        if entry.max_rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = entry.max_rel_error;
            report.worst = Some(name.clone());
        }
        report.params.push(entry);
    }
    Ok(report)
}
