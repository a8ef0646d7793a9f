//! Mini-batch training under the EWTA → blend → NLL schedule, checkpoints,
//! and evaluation of trained models and analytic baselines.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample, window_scenes, CenterPolicy, TrajectoryTable, WindowConfig};
use crate::diffcore::{evaluate_with_gradients, GradientRecord, Graph, ParameterSet};
use crate::error::{Error, Result};
use crate::gnn::GnnKind;
use crate::metrics::{agent_metrics, MetricsReport, SceneMetrics, Scope};
use crate::mixture::{GmmForecast, LossRecipe, Schedule};
use crate::model::{DecodeMode, Model, ModelConfig, Normalizer};
use crate::motion::{ca_predict, cv_predict, MotionOrder};
use crate::scenegraph::SceneSequence;

/// Every knob of a training run. Keys mirror the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub gnn: GnnKind,
    pub heads: usize,
    pub gnn_depth: usize,
    /// Motion model order, 1 or 2.
    pub order: u8,
    pub components: usize,
    pub ode_hidden: [usize; 2],
    pub slope: f64,
    pub sample_time: f64,
    /// Observation window in seconds.
    pub t_h: f64,
    /// Prediction horizon in seconds.
    pub t_f: f64,
    pub seed: u64,
    pub use_encoder_gnn: bool,
    pub use_decoder_gnn: bool,
    pub use_ekf: bool,
    pub use_ode: bool,
    pub use_static: bool,
    pub huber_delta: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per computation graph inside one batch.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            learning_rate: 3e-4,
            hidden: 32,
            gnn: GnnKind::GatPlus,
            heads: 1,
            gnn_depth: 2,
            order: 2,
            components: 8,
            ode_hidden: [16, 16],
            slope: 0.01,
            sample_time: 0.2,
            t_h: 3.0,
            t_f: 5.0,
            seed: 0,
            use_encoder_gnn: true,
            use_decoder_gnn: true,
            use_ekf: true,
            use_ode: true,
            use_static: false,
            huber_delta: 1.0,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            chunk_size: 8,
        }
    }
}

fn steps_of(seconds: f64, ts: f64, what: &str) -> Result<usize> {
    let steps = seconds / ts;
    let rounded = steps.round();
    if !(rounded >= 1.0) || (steps - rounded).abs() > 1e-6 {
        return Err(Error::Config(format!("{what} = {seconds} s is not a positive multiple of sample_time = {ts} s")));
    }
    Ok(rounded as usize)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 8 {
            return Err(Error::Config(format!("epochs must be at least 8, got {}", self.epochs)));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.clip_norm > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("huber_delta, clip_norm and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam moments must lie in [0, 1)".into()));
        }
        self.model_config()?.validate()
    }

    /// Architecture and ablation switches handed to [`Model::new`].
    pub fn model_config(&self) -> Result<ModelConfig> {
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::Config("sample_time must be positive".into()));
        }
        let order = match self.order {
            1 => MotionOrder::First,
            2 => MotionOrder::Second,
            o => return Err(Error::Config(format!("motion order must be 1 or 2, got {o}"))),
        };
        let cfg = ModelConfig {
            hidden: self.hidden,
            gnn: self.gnn,
            heads: self.heads,
            gnn_depth: self.gnn_depth,
            slope: self.slope,
            order,
            components: self.components,
            ode_hidden: self.ode_hidden,
            sample_time: self.sample_time,
            history: steps_of(self.t_h, self.sample_time, "t_h")?,
            horizon: steps_of(self.t_f, self.sample_time, "t_f")?,
            use_encoder_gnn: self.use_encoder_gnn,
            use_decoder_gnn: self.use_decoder_gnn,
            use_ekf: self.use_ekf,
            use_ode: self.use_ode,
            use_static: self.use_static,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resamples `table` to the configured sample time and cuts it into
/// windows of `t_h` history and `t_f` horizon.
pub fn prepare_scenes(
    table: &TrajectoryTable,
    config: &TrainConfig,
    stride: usize,
    center: CenterPolicy,
) -> Result<Vec<SceneSequence>> {
    let mc = config.model_config()?;
    if table.is_empty() {
        return Ok(Vec::new());
    }
    let ratio = config.sample_time / table.sample_time();
    let factor = ratio.round();
    if !(factor >= 1.0) || (ratio - factor).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "sample_time {} s is not a multiple of the data sample time {} s",
            config.sample_time,
            table.sample_time()
        )));
    }
    let resampled = downsample(table, factor as usize)?;
    let wc = WindowConfig { history: mc.history, horizon: mc.horizon, stride, center };
    window_scenes(&resampled, &wc)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(numel: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, step: 0, m: vec![0.0; numel], v: vec![0.0; numel] }
    }

    pub fn update(&mut self, params: &mut ParameterSet, grads: &GradientRecord) -> Result<()> {
        let g = grads.flatten();
        let mut theta = params.flatten();
        if g.len() != theta.len() || g.len() != self.m.len() {
            return Err(Error::Shape("gradient does not match the parameter set".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.unflatten(&theta)
    }
}

/// Rescales `grads` so that its global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradientRecord, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Loss recipe name as written to the training log.
pub fn recipe_label(r: LossRecipe) -> String {
    match r {
        LossRecipe::Ewta { k } => format!("ewta(k={k})"),
        LossRecipe::Blend { beta } => format!("blend(beta={beta})"),
        LossRecipe::Nll => "nll".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recipe: String,
    pub train_loss: f64,
    pub val_nll: Option<f64>,
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

/// Trained parameters plus everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub normalizer: Normalizer,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Seed of the epoch shuffles; resuming draws epoch `n` from `(seed, n)`.
    pub seed: u64,
    pub params: ParameterSet,
}

const CHECKPOINT_FORMAT: &str = "mtpgo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: TrainConfig,
    normalizer: Normalizer,
    epoch: usize,
    history: Vec<EpochRecord>,
    seed: u64,
}

impl Checkpoint {
    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config()?, self.normalizer, self.config.seed)?;
        let expected: Vec<(&str, (usize, usize))> = model.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, (usize, usize))> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Format("checkpoint parameters do not match its configuration".into()));
        }
        model.params = self.params.clone();
        Ok(model)
    }

    /// One JSON header line followed by the binary tensor payload.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            normalizer: self.normalizer,
            epoch: self.epoch,
            history: self.history.clone(),
            seed: self.seed,
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        self.params.write_to(w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
        }
        let params = ParameterSet::read_from(&mut r)?;
        Ok(Checkpoint {
            config: header.config,
            normalizer: header.normalizer,
            epoch: header.epoch,
            history: header.history,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.checkpoint.history
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Loss value, gradient and number of loss-bearing agents over `scenes`,
/// evaluated in graph-sized chunks and recombined with agent-count weights.
fn batch_gradient(
    model: &Model,
    scenes: &[&SceneSequence],
    recipe: LossRecipe,
    cfg: &TrainConfig,
) -> Result<Option<(f64, GradientRecord, usize)>> {
    let mut parts = Vec::new();
    for chunk in scenes.chunks(cfg.chunk_size) {
        let batch = model.prepare(chunk)?;
        let count = batch.loss_agents();
        if count == 0 {
            continue;
        }
        let (loss, grads) = evaluate_with_gradients(
            |g, p| {
                let out = model.forward(g, p, &batch, DecodeMode::TeacherForcing)?;
                Ok(model.loss(g, &out, &batch, recipe, cfg.huber_delta))
            },
            &model.params,
        )?;
        parts.push((loss, grads, count));
    }
    let total: usize = parts.iter().map(|p| p.2).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut loss = 0.0;
    let mut grads = model.params.zeros_like();
    for (l, mut g, c) in parts {
        let w = c as f64 / total as f64;
        loss += w * l;
        g.scale(w);
        grads.add_assign(&g);
    }
    Ok(Some((loss, grads, total)))
}

/// Mean rollout NLL per agent step over the full-future agents of `scenes`.
pub fn validation_nll(model: &Model, scenes: &[&SceneSequence], chunk_size: usize) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut total = 0usize;
    for chunk in scenes.chunks(chunk_size.max(1)) {
        let batch = model.prepare(chunk)?;
        let count = batch.loss_agents();
        if count == 0 {
            continue;
        }
        let g = Graph::new();
        let p = model.params.bind_constant(&g);
        let out = model.forward(&g, &p, &batch, DecodeMode::Rollout)?;
        let loss = g.item(model.loss(&g, &out, &batch, LossRecipe::Nll, 1.0));
        sum += loss * count as f64;
        total += count;
    }
    Ok((total > 0).then(|| sum / total as f64))
}

/// Trains a fresh model; `log` receives every completed epoch.
///
/// A non-finite loss or gradient stops training and returns the parameters
/// from before the offending batch with [`TrainStatus::Diverged`].
pub fn train(
    config: &TrainConfig,
    train_scenes: &[SceneSequence],
    val_scenes: &[SceneSequence],
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model_config = config.model_config()?;
    for s in train_scenes.iter().chain(val_scenes) {
        if s.history_len() != model_config.history + 1 || s.horizon() != model_config.horizon {
            return Err(Error::Config(format!(
                "scene shape ({} history, {} horizon) does not match t_h/t_f ({} + 1, {})",
                s.history_len(),
                s.horizon(),
                model_config.history,
                model_config.horizon
            )));
        }
    }
    let normalizer = Normalizer::fit(train_scenes);
    let mut model = Model::new(model_config, normalizer, config.seed)?;
    let schedule = Schedule::new(config.epochs, config.components)?;
    let mut adam = Adam::new(model.params.numel(), config.learning_rate, config.beta1, config.beta2, config.eps);
    let val: Vec<&SceneSequence> = val_scenes.iter().collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();

    let checkpoint = |model: &Model, history: &Vec<EpochRecord>| Checkpoint {
        config: config.clone(),
        normalizer,
        epoch: history.len(),
        history: history.clone(),
        seed: config.seed,
        params: model.params.clone(),
    };

    for epoch in 0..config.epochs {
        let recipe = schedule.recipe(epoch);
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let mut loss_sum = 0.0;
        let mut agents = 0usize;
        let mut max_norm: f64 = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&SceneSequence> = idx.iter().map(|&i| &train_scenes[i]).collect();
            let step = match batch_gradient(&model, &batch, recipe, config) {
                Ok(Some(step)) => step,
                Ok(None) => continue,
                Err(e @ (Error::NonFinite { .. } | Error::Numeric(_))) => {
                    return Ok(TrainOutcome {
                        checkpoint: checkpoint(&model, &history),
                        status: TrainStatus::Diverged { epoch, reason: e.to_string() },
                    });
                }
                Err(e) => return Err(e),
            };
            let (loss, mut grads, count) = step;
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: checkpoint(&model, &history),
                    status: TrainStatus::Diverged { epoch, reason: format!("loss {loss}") },
                });
            }
            max_norm = max_norm.max(clip_global_norm(&mut grads, config.clip_norm));
            let before = model.params.clone();
            adam.update(&mut model.params, &grads)?;
            if !model.params.flatten().iter().all(|v| v.is_finite()) {
                model.params = before;
                return Ok(TrainOutcome {
                    checkpoint: checkpoint(&model, &history),
                    status: TrainStatus::Diverged { epoch, reason: "non-finite parameter update".into() },
                });
            }
            loss_sum += loss * count as f64;
            agents += count;
        }
        if agents == 0 {
            return Err(Error::Config("no training agent has a complete future".into()));
        }
        let val_nll = match validation_nll(&model, &val, config.chunk_size) {
            Ok(v) => v,
            Err(e @ (Error::NonFinite { .. } | Error::Numeric(_))) => {
                return Ok(TrainOutcome {
                    checkpoint: checkpoint(&model, &history),
                    status: TrainStatus::Diverged { epoch, reason: e.to_string() },
                });
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            recipe: recipe_label(recipe),
            train_loss: loss_sum / agents as f64,
            val_nll,
            max_grad_norm: max_norm,
        };
        log(&record);
        history.push(record);
    }
    Ok(TrainOutcome { checkpoint: checkpoint(&model, &history), status: TrainStatus::Completed })
}

/// Anything that turns scenes into per-agent mixture forecasts.
pub trait Forecaster {
    fn name(&self) -> String;
    /// Whether forecasts carry meaningful covariances for likelihood metrics.
    fn has_likelihood(&self) -> bool;
    fn forecast(&self, scenes: &[&SceneSequence]) -> Result<Vec<Vec<GmmForecast>>>;
}

impl Forecaster for Model {
    fn name(&self) -> String {
        "mtp-go".into()
    }

    fn has_likelihood(&self) -> bool {
        true
    }

    fn forecast(&self, scenes: &[&SceneSequence]) -> Result<Vec<Vec<GmmForecast>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(16) {
            out.extend(self.predict(chunk)?);
        }
        Ok(out)
    }
}

/// Analytic single-hypothesis baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Cv,
    Ca,
}

impl Baseline {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cv" => Some(Baseline::Cv),
            "ca" => Some(Baseline::Ca),
            _ => None,
        }
    }
}

impl Forecaster for Baseline {
    fn name(&self) -> String {
        match self {
            Baseline::Cv => "cv".into(),
            Baseline::Ca => "ca".into(),
        }
    }

    fn has_likelihood(&self) -> bool {
        false
    }

    fn forecast(&self, scenes: &[&SceneSequence]) -> Result<Vec<Vec<GmmForecast>>> {
        Ok(scenes
            .iter()
            .map(|s| {
                let tf = s.horizon();
                s.agents
                    .iter()
                    .map(|a| {
                        let n = a.current().map(|o| o.node).unwrap_or_default();
                        let path = match self {
                            Baseline::Cv => cv_predict([n.x, n.y], [n.vx, n.vy], s.sample_time, tf),
                            Baseline::Ca => ca_predict([n.x, n.y], [n.vx, n.vy], [n.ax, n.ay], s.sample_time, tf),
                        };
                        GmmForecast::deterministic(path, [0.0; 4])
                    })
                    .collect()
            })
            .collect())
    }
}

/// Rollout metrics of `forecaster` over the full-future agents in `scope`.
pub fn evaluate(forecaster: &dyn Forecaster, scenes: &[SceneSequence], scope: Scope) -> Result<MetricsReport> {
    let refs: Vec<&SceneSequence> = scenes.iter().collect();
    let forecasts = forecaster.forecast(&refs)?;
    let mut per_scene = Vec::new();
    for (i, (scene, fc)) in scenes.iter().zip(&forecasts).enumerate() {
        let mut agents = Vec::new();
        for (a, f) in scene.agents.iter().zip(fc) {
            if !a.has_full_future() || (scope == Scope::Center && a.id != scene.center) {
                continue;
            }
            let truth: Vec<[f64; 2]> = a.future.iter().flatten().map(|s| [s.x, s.y]).collect();
            agents.push(agent_metrics(f, &truth, forecaster.has_likelihood())?);
        }
        per_scene.extend(SceneMetrics::from_agents(i, &agents));
    }
    Ok(MetricsReport::new(forecaster.name(), scope, per_scene))
}
