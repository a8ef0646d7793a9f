//! Displacement and likelihood metrics plus confidence-interval aggregation.

use crate::error::{Error, Result};
use crate::mixture::GmmForecast;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Final-position error above which a prediction counts as a miss.
pub const MISS_THRESHOLD: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_lengths(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("prediction has {} steps, truth {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty horizon".into()));
    }
    Ok(())
}

/// Mean Euclidean error over the horizon.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(&p, &s)| dist(p, s)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean error at the final step.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Fraction of final errors strictly above `threshold`.
pub fn miss_rate(final_errors: &[f64], threshold: f64) -> f64 {
    if final_errors.is_empty() {
        return 0.0;
    }
    final_errors.iter().filter(|&&e| e > threshold).count() as f64 / final_errors.len() as f64
}

/// Mean over predicted points of the distance to the nearest truth point.
pub fn apde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if truth.is_empty() || pred.is_empty() {
        return Err(Error::Shape("empty path".into()));
    }
    let total: f64 = pred
        .iter()
        .map(|&p| truth.iter().map(|&s| dist(p, s)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mixture NLL averaged over the horizon.
pub fn anll(forecast: &GmmForecast, truth: &[[f64; 2]]) -> Result<f64> {
    if truth.len() != forecast.horizon() || truth.is_empty() {
        return Err(Error::Shape("forecast and truth horizons differ".into()));
    }
    let total: f64 = truth
        .iter()
        .enumerate()
        .map(|(k, &s)| forecast.step_nll(k, s))
        .sum::<Result<f64>>()?;
    Ok(total / truth.len() as f64)
}

/// Mixture NLL at the final step.
pub fn fnll(forecast: &GmmForecast, truth: &[[f64; 2]]) -> Result<f64> {
    if truth.len() != forecast.horizon() || truth.is_empty() {
        return Err(Error::Shape("forecast and truth horizons differ".into()));
    }
    forecast.step_nll(truth.len() - 1, truth[truth.len() - 1])
}

/// Two-sided 95% Student-t quantiles for 1..=29 degrees of freedom, to two
/// decimals.
const T_TABLE: [f64; 29] = [
    12.71, 4.30, 3.18, 2.78, 2.57, 2.45, 2.36, 2.31, 2.26, 2.23, 2.20, 2.18, 2.16, 2.14, 2.13, 2.12, 2.11, 2.10, 2.09,
    2.09, 2.08, 2.07, 2.07, 2.06, 2.06, 2.06, 2.05, 2.05, 2.05,
];

/// Quantile used for a sample of `n` values: tabulated up to `n = 30`,
/// the normal 1.96 beyond.
pub fn t_quantile(n: usize) -> f64 {
    if (2..=30).contains(&n) {
        T_TABLE[n - 2]
    } else {
        1.96
    }
}

/// Mean and 95% confidence half-width `t·S/√n`.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 values for a confidence interval, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, t_quantile(n) * var.sqrt() / (n as f64).sqrt()))
}

/// Which agents of a scene enter the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    All,
    Center,
}

/// Metrics of one agent's forecast, computed on the most likely component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub ade: f64,
    pub fde: f64,
    pub apde: f64,
    pub anll: Option<f64>,
    pub fnll: Option<f64>,
}

/// `with_likelihood` is false for forecasts without meaningful covariances.
pub fn agent_metrics(forecast: &GmmForecast, truth: &[[f64; 2]], with_likelihood: bool) -> Result<AgentMetrics> {
    let best = &forecast.means[forecast.most_likely()];
    Ok(AgentMetrics {
        ade: ade(best, truth)?,
        fde: fde(best, truth)?,
        apde: apde(best, truth)?,
        anll: if with_likelihood { Some(anll(forecast, truth)?) } else { None },
        fnll: if with_likelihood { Some(fnll(forecast, truth)?) } else { None },
    })
}

/// Per-scene means over the evaluated agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub agents: usize,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub apde: f64,
    pub anll: Option<f64>,
    pub fnll: Option<f64>,
}

impl SceneMetrics {
    pub fn from_agents(scene: usize, agents: &[AgentMetrics]) -> Option<Self> {
        if agents.is_empty() {
            return None;
        }
        let n = agents.len() as f64;
        let mean = |f: &dyn Fn(&AgentMetrics) -> f64| agents.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: &dyn Fn(&AgentMetrics) -> Option<f64>| {
            agents.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        let finals: Vec<f64> = agents.iter().map(|a| a.fde).collect();
        Some(Self {
            scene,
            agents: agents.len(),
            ade: mean(&|a| a.ade),
            fde: mean(&|a| a.fde),
            mr: miss_rate(&finals, MISS_THRESHOLD),
            apde: mean(&|a| a.apde),
            anll: opt_mean(&|a| a.anll),
            fnll: opt_mean(&|a| a.fnll),
        })
    }
}

/// Mean with confidence half-width (zero when fewer than two samples).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        match values.len() {
            0 => None,
            1 => Some(Self { mean: values[0], ci: 0.0 }),
            _ => mean_ci(values).ok().map(|(mean, ci)| Self { mean, ci }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub scope: Scope,
    /// Total number of evaluated agents.
    pub agents: usize,
    pub ade: Option<Stat>,
    pub fde: Option<Stat>,
    pub mr: Option<Stat>,
    pub apde: Option<Stat>,
    pub anll: Option<Stat>,
    pub fnll: Option<Stat>,
    pub scenes: Vec<SceneMetrics>,
}

impl MetricsReport {
    /// Aggregates over scenes; the per-agent miss rate is computed over all
    /// agents, the interval over per-scene values.
    pub fn new(model: impl Into<String>, scope: Scope, scenes: Vec<SceneMetrics>) -> Self {
        let col = |f: &dyn Fn(&SceneMetrics) -> f64| scenes.iter().map(f).collect::<Vec<f64>>();
        let opt_col = |f: &dyn Fn(&SceneMetrics) -> Option<f64>| scenes.iter().map(f).collect::<Option<Vec<f64>>>();
        let agents = scenes.iter().map(|s| s.agents).sum();
        Self {
            model: model.into(),
            scope,
            agents,
            ade: Stat::of(&col(&|s| s.ade)),
            fde: Stat::of(&col(&|s| s.fde)),
            mr: Stat::of(&col(&|s| s.mr)),
            apde: Stat::of(&col(&|s| s.apde)),
            anll: opt_col(&|s| s.anll).and_then(|v| Stat::of(&v)),
            fnll: opt_col(&|s| s.fnll).and_then(|v| Stat::of(&v)),
            scenes,
        }
    }

    /// One line per metric, `name mean ± ci`.
    pub fn summary(&self) -> String {
        let mut out = format!("model {} ({} scenes, {} agents)\n", self.model, self.scenes.len(), self.agents);
        for (name, s) in [
            ("ADE", self.ade),
            ("FDE", self.fde),
            ("MR", self.mr),
            ("APDE", self.apde),
            ("ANLL", self.anll),
            ("FNLL", self.fnll),
        ] {
            match s {
                Some(s) => writeln!(out, "{name:<5} {:.4} ± {:.4}", s.mean, s.ci).unwrap(),
                None => writeln!(out, "{name:<5} n/a").unwrap(),
            }
        }
        out
    }

    /// Flat CSV table, one row per scene.
    pub fn table(&self) -> String {
        let mut out = String::from("scene,agents,ade,fde,mr,apde,anll,fnll\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for s in &self.scenes {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.scene,
                s.agents,
                s.ade,
                s.fde,
                s.mr,
                s.apde,
                opt(s.anll),
                opt(s.fnll)
            )
            .unwrap();
        }
        out
    }
}
