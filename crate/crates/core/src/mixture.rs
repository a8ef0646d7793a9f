//! Gaussian-mixture forecasts, the mixture negative log-likelihood, the
//! evolving winner-takes-all loss and the training-objective schedule.

use crate::diffcore::activations::huber;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::uncertainty::LIKELIHOOD_FLOOR;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::rc::Rc;

/// `ln 2π`, the bivariate normalising constant.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Mixture forecast for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmForecast {
    /// Horizon-constant component weights.
    pub pi: Vec<f64>,
    /// `means[j][k]`: position of component `j` at horizon step `k`.
    pub means: Vec<Vec<[f64; 2]>>,
    /// `covs[j][k]`: row-major 2 × 2 position covariance (before the floor).
    pub covs: Vec<Vec<[f64; 4]>>,
}

impl GmmForecast {
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn horizon(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Single-component forecast with unit weight, e.g. from a baseline.
    pub fn deterministic(path: Vec<[f64; 2]>, cov: [f64; 4]) -> Self {
        let n = path.len();
        Self {
            pi: vec![1.0],
            means: vec![path],
            covs: vec![vec![cov; n]],
        }
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn most_likely(&self) -> usize {
        most_likely_component(&self.pi)
    }

    /// Mixture NLL of `truth` at horizon step `k`.
    pub fn step_nll(&self, k: usize, truth: [f64; 2]) -> Result<f64> {
        let terms = (0..self.components())
            .map(|j| Ok(self.pi[j].ln() + bivariate_log_density(truth, self.means[j][k], self.covs[j][k])?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(-log_sum_exp(&terms))
    }
}

pub fn most_likely_component(pi: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in pi.iter().enumerate() {
        if p > pi[best] {
            best = j;
        }
    }
    best
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log density of a bivariate normal with the likelihood floor added to the
/// covariance diagonal.
pub fn bivariate_log_density(x: [f64; 2], mean: [f64; 2], cov: [f64; 4]) -> Result<f64> {
    let a = cov[0] + LIKELIHOOD_FLOOR;
    let b = 0.5 * (cov[1] + cov[2]);
    let c = cov[3] + LIKELIHOOD_FLOOR;
    let det = a * c - b * b;
    if !(det > 0.0 && a > 0.0) {
        return Err(Error::Numeric(format!("covariance not positive definite (det {det})")));
    }
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    let maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    Ok(-(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * maha)
}

/// Sum over the horizon of the mixture NLL of `truth`.
pub fn gmm_nll(forecast: &GmmForecast, truth: &[[f64; 2]]) -> Result<f64> {
    if truth.len() != forecast.horizon() {
        return Err(Error::Shape(format!(
            "truth has {} steps, forecast {}",
            truth.len(),
            forecast.horizon()
        )));
    }
    truth.iter().enumerate().map(|(k, &s)| forecast.step_nll(k, s)).sum()
}

/// Per-component Huber error summed over coordinates and horizon.
pub fn component_errors(means: &[Vec<[f64; 2]>], truth: &[[f64; 2]], delta: f64) -> Vec<f64> {
    means
        .iter()
        .map(|path| {
            path.iter()
                .zip(truth)
                .map(|(p, s)| huber(p[0] - s[0], delta) + huber(p[1] - s[1], delta))
                .sum()
        })
        .collect()
}

/// Indices of the `k` smallest totals, lowest index first among ties.
pub fn winners(totals: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// EWTA loss on plain values.
pub fn ewta_loss(means: &[Vec<[f64; 2]>], truth: &[[f64; 2]], k: usize, delta: f64) -> Result<f64> {
    if k == 0 || k > means.len() {
        return Err(Error::Invalid(format!("winner count {k} outside 1..={}", means.len())));
    }
    let totals = component_errors(means, truth, delta);
    Ok(winners(&totals, k).iter().map(|&j| totals[j]).sum())
}

/// Training objective for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum LossRecipe {
    Ewta { k: usize },
    Blend { beta: f64 },
    Nll,
}

impl LossRecipe {
    /// Weights `(EWTA, NLL)` of the objective and the winner count.
    pub fn weights(&self) -> (f64, f64, usize) {
        match *self {
            LossRecipe::Ewta { k } => (1.0, 0.0, k),
            LossRecipe::Blend { beta } => (beta, 1.0 - beta, 1),
            LossRecipe::Nll => (0.0, 1.0, 1),
        }
    }
}

/// Winner-count and blending schedule over `total` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total: usize,
    pub t_ewta: usize,
    pub t_warm: usize,
    pub components: usize,
}

impl Schedule {
    /// `T_EWTA = T/8`, `T_warm = T/4`.
    pub fn new(total: usize, components: usize) -> Result<Self> {
        if total < 8 {
            return Err(Error::Config(format!("epochs must be at least 8, got {total}")));
        }
        if components == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        Ok(Self::with_thresholds(total, total / 8, total / 4, components))
    }

    pub fn with_thresholds(total: usize, t_ewta: usize, t_warm: usize, components: usize) -> Self {
        Self {
            total,
            t_ewta,
            t_warm,
            components,
        }
    }

    pub fn recipe(&self, n: usize) -> LossRecipe {
        if n < self.t_ewta {
            let num = self.components * (self.t_ewta - n);
            LossRecipe::Ewta {
                k: num.div_ceil(self.t_ewta),
            }
        } else if n < self.t_warm {
            LossRecipe::Blend {
                beta: (self.t_warm - n) as f64 / (self.t_warm - self.t_ewta) as f64,
            }
        } else {
            LossRecipe::Nll
        }
    }
}

/// Stacked forecasts of a batch in the layout produced by the model:
/// `R = N·M` rows per horizon step (agent-major, component-minor), steps
/// stacked on top of each other.
#[derive(Clone, Copy, Debug)]
pub struct StackedForecast {
    /// `N × M` log weights.
    pub log_pi: Var,
    /// `(t_f·R) × 2` positions.
    pub means: Var,
    /// `(t_f·R) × 4` position covariances.
    pub covs: Var,
    pub agents: usize,
    pub components: usize,
    pub horizon: usize,
}

/// Targets matching a [`StackedForecast`].
#[derive(Clone, Debug)]
pub struct StackedTruth {
    /// `(t_f·N) × 2` true positions; rows of excluded agents are arbitrary
    /// finite values.
    pub positions: Tensor,
    /// Loss weight per agent; zero excludes the agent.
    pub agent_weight: Vec<f64>,
}

impl StackedTruth {
    fn repeated_positions(&self, m: usize) -> Tensor {
        let (rows, _) = self.positions.shape();
        let mut out = Vec::with_capacity(rows * m * 2);
        for r in 0..rows {
            for _ in 0..m {
                out.extend_from_slice(self.positions.row(r));
            }
        }
        Tensor::from_vec(rows * m, 2, out)
    }
}

/// Weighted mixture NLL summed over horizon steps and agents.
pub fn gmm_nll_graph(g: &Graph, f: &StackedForecast, truth: &StackedTruth) -> Var {
    let (n, m, tf) = (f.agents, f.components, f.horizon);
    let x = g.constant(truth.repeated_positions(m));
    let d = g.sub(x, f.means);
    let dx = g.slice_cols(d, 0, 1);
    let dy = g.slice_cols(d, 1, 1);
    let a = g.offset(g.slice_cols(f.covs, 0, 1), LIKELIHOOD_FLOOR);
    let b = g.scale(g.add(g.slice_cols(f.covs, 1, 1), g.slice_cols(f.covs, 2, 1)), 0.5);
    let c = g.offset(g.slice_cols(f.covs, 3, 1), LIKELIHOOD_FLOOR);
    let det = g.sub(g.mul(a, c), g.square(b));
    let quad = g.add(
        g.sub(g.mul(c, g.square(dx)), g.scale(g.mul(b, g.mul(dx, dy)), 2.0)),
        g.mul(a, g.square(dy)),
    );
    let maha = g.div(quad, det);
    let log_n = g.offset(g.scale(g.add(g.ln(det), maha), -0.5), -LN_2PI);
    let log_n = g.reshape(log_n, tf * n, m);
    let idx: Rc<[usize]> = (0..tf * n).map(|r| r % n).collect();
    let joint = g.add(log_n, g.gather_rows(f.log_pi, idx));
    let lse = g.row_logsumexp(joint);
    let w: Vec<f64> = (0..tf * n).map(|r| -truth.agent_weight[r % n]).collect();
    g.sum(g.mul(lse, g.constant(Tensor::col_vector(&w))))
}

/// Per-agent, per-component Huber totals `N × M`.
fn component_totals(g: &Graph, f: &StackedForecast, truth: &StackedTruth, delta: f64) -> Var {
    let (n, m, tf) = (f.agents, f.components, f.horizon);
    let x = g.constant(truth.repeated_positions(m));
    let per_row = g.row_sum(g.huber(g.sub(f.means, x), delta));
    let per_step = g.reshape(per_row, tf, n * m);
    let totals = g.matmul(g.constant(Tensor::filled(1, tf, 1.0)), per_step);
    g.reshape(totals, n, m)
}

/// Weighted EWTA loss with `k` winners per agent. The winner set is chosen
/// from the current values and held constant.
pub fn ewta_loss_graph(g: &Graph, f: &StackedForecast, truth: &StackedTruth, k: usize, delta: f64) -> Var {
    let (n, m) = (f.agents, f.components);
    let totals = component_totals(g, f, truth, delta);
    let mut select = Tensor::zeros(n, m);
    {
        let tv = g.value(totals);
        for a in 0..n {
            let w = truth.agent_weight[a];
            if w == 0.0 {
                continue;
            }
            for j in winners(tv.row(a), k) {
                select.set(a, j, w);
            }
        }
    }
    g.sum(g.mul(totals, g.constant(select)))
}
