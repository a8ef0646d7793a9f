//! Loss evaluation with exact gradients, and the central-difference oracle
//! used to verify them.

use super::graph::{Graph, Var};
use super::params::{BoundParams, GradientRecord, ParameterSet};
use crate::error::{Error, Result};

/// Evaluates `loss_fn` and its reverse-mode gradient with respect to every
/// parameter.
pub fn evaluate_with_gradients<F>(loss_fn: F, params: &ParameterSet) -> Result<(f64, GradientRecord)>
where
    F: Fn(&Graph, &BoundParams) -> Result<Var>,
{
    let g = Graph::new();
    let bound = params.bind(&g);
    let loss = loss_fn(&g, &bound)?;
    if let Some(bad) = g.first_non_finite() {
        return Err(Error::NonFinite {
            op: bad.op.to_string(),
            node: bad.node,
        });
    }
    let value = g.item(loss);
    let grads = g.backward(loss);
    let record = bound.gradients(params, &grads);
    if !record.all_finite() {
        return Err(Error::NonFinite {
            op: "backward".into(),
            node: loss.index(),
        });
    }
    Ok((value, record))
}

/// Evaluates `loss_fn` without recording gradients.
pub fn evaluate<F>(loss_fn: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&Graph, &BoundParams) -> Result<Var>,
{
    let g = Graph::new();
    let bound = params.bind_constant(&g);
    let loss = loss_fn(&g, &bound)?;
    Ok(g.item(loss))
}

/// Central-difference gradient estimate `(f(θ+h) − f(θ−h)) / 2h` per
/// coordinate.
pub fn finite_difference_oracle<F>(loss_fn: F, params: &ParameterSet, step: f64) -> Result<GradientRecord>
where
    F: Fn(&Graph, &BoundParams) -> Result<Var>,
{
    let mut out = finite_difference_oracle_multi(|g, p| Ok(vec![loss_fn(g, p)?]), params, step)?;
    Ok(out.remove(0))
}

/// Central differences of several scalar losses computed from one graph
/// per probe, so expensive shared work runs once for all of them.
pub fn finite_difference_oracle_multi<F>(losses_fn: F, params: &ParameterSet, step: f64) -> Result<Vec<GradientRecord>>
where
    F: Fn(&Graph, &BoundParams) -> Result<Vec<Var>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |probe: &ParameterSet| -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = probe.bind_constant(&g);
        Ok(losses_fn(&g, &bound)?.into_iter().map(|v| g.item(v)).collect())
    };
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = vec![vec![0.0; base.len()]; eval(params)?.len()];
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + step;
        probe.unflatten(&theta)?;
        let plus = eval(&probe)?;
        theta[i] = base[i] - step;
        probe.unflatten(&theta)?;
        let minus = eval(&probe)?;
        theta[i] = base[i];
        for (k, (a, b)) in plus.iter().zip(&minus).enumerate() {
            out[k][i] = (a - b) / (2.0 * step);
        }
    }
    Ok(out.iter().map(|flat| GradientRecord::from_flat(params, flat)).collect())
}

/// Result of comparing an analytic gradient with a numeric one.
#[derive(Clone, Debug)]
pub struct GradientComparison {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradientComparison {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// entries whose true gradient is zero from being judged on rounding noise.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Denominator floor proportional to the largest analytic entry, never
/// below `factor`. Central differences carry rounding noise of roughly
/// `ε·|L|/h`, so entries far below the gradient scale are judged against it.
pub fn scaled_floor(analytic: &GradientRecord, factor: f64) -> f64 {
    factor * analytic.flatten().iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

pub fn compare_gradients(analytic: &GradientRecord, numeric: &GradientRecord, floor: f64) -> GradientComparison {
    let mut cmp = GradientComparison {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            cmp.checked += 1;
            let e = relative_error(av, nv, floor);
            if e > cmp.max_rel_error || e.is_nan() {
                cmp.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                cmp.worst_param = name.to_string();
                cmp.worst_index = i;
                cmp.analytic = av;
                cmp.numeric = nv;
            }
        }
    }
    cmp
}
