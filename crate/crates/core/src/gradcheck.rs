//! End-to-end gradient verification of the scheduled training loss against
//! central finite differences on a small generated scene.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{downsample, generate_synthetic, window_scenes, CenterPolicy, SyntheticKind, WindowConfig};
use crate::diffcore::{
    compare_gradients, evaluate_with_gradients, finite_difference_oracle_multi, scaled_floor, BoundParams, GradientRecord,
    Graph, ParameterSet,
};
use crate::error::{Error, Result};
use crate::mixture::LossRecipe;
use crate::model::{DecodeMode, Model, ModelConfig, Normalizer};
use crate::scenegraph::SceneSequence;
use crate::trainer::recipe_label;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Relative error floor, as a fraction of the largest analytic entry.
    pub floor: f64,
    /// Uniform perturbation applied to a fresh model before checking.
    pub jitter: f64,
    pub seed: u64,
    /// Test hook: perturb one analytic gradient entry before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, tolerance: 1e-4, floor: 1e-4, jitter: 0.1, seed: 0, corrupt: false }
    }
}

/// Outcome for one loss recipe.
#[derive(Clone, Debug, Serialize)]
pub struct RecipeCheck {
    pub recipe: String,
    pub loss: f64,
    /// Worst error with the scaled floor applied.
    pub max_relative_error: f64,
    /// Worst error with a floor of 1e-12, for reference.
    pub max_unfloored_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub agents: usize,
    pub checks: Vec<RecipeCheck>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Model configuration of the standard check: `d_h = 8`, `M = 2`,
/// five history steps and four horizon steps.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig { hidden: 8, components: 2, history: 5, horizon: 4, ..ModelConfig::default() }
}

/// A highway window reduced to three fully observed agents with complete
/// futures, the centre agent first.
pub fn gradcheck_scene(history: usize, horizon: usize, seed: u64) -> Result<SceneSequence> {
    let table = downsample(&generate_synthetic(SyntheticKind::Highway, 2, seed)?, 5)?;
    let wc = WindowConfig { history, horizon, stride: 5, center: CenterPolicy::First };
    for mut scene in window_scenes(&table, &wc)? {
        let complete = |a: &crate::scenegraph::AgentTrack| a.has_full_future() && a.history.iter().all(Option::is_some);
        let Some(c) = scene.agents.iter().position(|a| a.id == scene.center && complete(a)) else {
            continue;
        };
        let centre_pos = scene.agents[c].current().map(|o| o.node.position()).unwrap_or_default();
        let mut others: Vec<usize> = (0..scene.agents.len()).filter(|&i| i != c && complete(&scene.agents[i])).collect();
        if others.len() < 2 {
            continue;
        }
        let dist = |i: usize| {
            let p = scene.agents[i].current().map(|o| o.node.position()).unwrap_or_default();
            (p[0] - centre_pos[0]).hypot(p[1] - centre_pos[1])
        };
        others.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)));
        let keep = [c, others[0], others[1]];
        scene.agents = keep.iter().map(|&i| scene.agents[i].clone()).collect();
        scene.rebuild_graphs();
        scene.validate()?;
        return Ok(scene);
    }
    Err(Error::Invalid("no window with three complete agents".into()))
}

/// Adds uniform noise of half-width `scale` to every parameter. A fresh
/// model has identical component means, which makes the winner selection
/// of EWTA non-differentiable; the perturbation separates them.
pub fn perturb(params: &mut ParameterSet, scale: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = params.flatten().iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
    params.unflatten(&flat)
}

/// Checks every loss recipe the schedule can produce for `config.components`.
pub fn gradcheck(config: &ModelConfig, scene: &SceneSequence, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut model = Model::new(config.clone(), Normalizer::fit([scene]), opts.seed)?;
    perturb(&mut model.params, opts.jitter, opts.seed.wrapping_add(1))?;
    let batch = model.prepare(&[scene])?;
    let recipes = [LossRecipe::Ewta { k: 1 }, LossRecipe::Blend { beta: 0.5 }, LossRecipe::Nll];
    let all_losses = |g: &Graph, p: &BoundParams| {
        let out = model.forward(g, p, &batch, DecodeMode::TeacherForcing)?;
        Ok(recipes.iter().map(|&r| model.loss(g, &out, &batch, r, 1.0)).collect())
    };
    let numeric = finite_difference_oracle_multi(all_losses, &model.params, opts.step)?;
    let mut checks = Vec::new();
    for (recipe, numeric) in recipes.into_iter().zip(&numeric) {
        let loss_fn = |g: &Graph, p: &BoundParams| {
            let out = model.forward(g, p, &batch, DecodeMode::TeacherForcing)?;
            Ok(model.loss(g, &out, &batch, recipe, 1.0))
        };
        let (loss, mut analytic) = evaluate_with_gradients(loss_fn, &model.params)?;
        if opts.corrupt {
            let mut flat = analytic.flatten();
            let i = flat.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map_or(0, |(i, _)| i);
            flat[i] = flat[i] * 1.01 + 1e-3;
            analytic = GradientRecord::from_flat(&model.params, &flat);
        }
        let floored = compare_gradients(&analytic, numeric, scaled_floor(&analytic, opts.floor));
        let raw = compare_gradients(&analytic, numeric, 1e-12);
        checks.push(RecipeCheck {
            recipe: recipe_label(recipe),
            loss,
            max_relative_error: floored.max_rel_error,
            max_unfloored_error: raw.max_rel_error,
            worst_parameter: floored.worst_param.clone(),
            passed: floored.passes(opts.tolerance),
        });
    }
    Ok(GradcheckReport { parameters: model.params.numel(), agents: scene.num_agents(), checks, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, SceneSequence) {
        let cfg = ModelConfig { hidden: 3, components: 2, history: 2, horizon: 2, ode_hidden: [3, 3], ..ModelConfig::default() };
        let scene = gradcheck_scene(2, 2, 0).unwrap();
        (cfg, scene)
    }

    #[test]
    fn scene_has_three_complete_agents() {
        let s = gradcheck_scene(5, 4, 0).unwrap();
        assert_eq!(s.num_agents(), 3);
        assert_eq!(s.agents[0].id, s.center);
        assert_eq!(s.history_len(), 6);
        assert!(s.agents.iter().all(|a| a.has_full_future()));
        assert_eq!(s.last_graph().edges.len(), 3);
    }

    #[test]
    fn small_model_passes_and_corruption_fails() {
        let (cfg, scene) = small();
        let ok = gradcheck(&cfg, &scene, &GradcheckOptions::default()).unwrap();
        assert!(ok.passed(), "{:?}", ok.checks);
        assert_eq!(ok.checks.len(), 3);
        let bad = gradcheck(&cfg, &scene, &GradcheckOptions { corrupt: true, ..Default::default() }).unwrap();
        assert!(!bad.passed());
    }
}
