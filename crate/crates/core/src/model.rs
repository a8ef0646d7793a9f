//! The full forecasting network: graph-GRU encoder, attentive graph-GRU
//! decoder, neural-ODE motion model with EKF covariance propagation, and
//! the Gaussian-mixture output.

use crate::diffcore::{BoundParams, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnKind, GraphBatch, GraphTopology};
use crate::mixture::{ewta_loss_graph, gmm_nll_graph, GmmForecast, LossRecipe, StackedForecast, StackedTruth};
use crate::motion::{InputScaling, MotionConfig, MotionModel, MotionOrder};
use crate::recurrent::{Decoder, DecoderShape, Encoder, EncoderMemory, EncoderStep, RAW_PER_COMPONENT};
use crate::scenegraph::{SceneSequence, StepGraph, CATEGORY_COUNT, DEFAULT_SIGMA_E, FEATURE_DIM};
use crate::uncertainty::{ekf_time_update, position_block, process_noise, CovarianceStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Scale of the position offsets emitted by the decoder when the motion
/// model is disabled, in metres.
pub const MDN_OFFSET_SCALE: f64 = 10.0;

/// Architecture and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub gnn: GnnKind,
    pub heads: usize,
    pub gnn_depth: usize,
    pub slope: f64,
    pub order: MotionOrder,
    pub components: usize,
    pub ode_hidden: [usize; 2],
    pub sample_time: f64,
    /// History steps before the prediction instant.
    pub history: usize,
    pub horizon: usize,
    pub use_encoder_gnn: bool,
    pub use_decoder_gnn: bool,
    pub use_ekf: bool,
    pub use_ode: bool,
    pub use_static: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            gnn: GnnKind::GatPlus,
            heads: 1,
            gnn_depth: 2,
            slope: 0.01,
            order: MotionOrder::Second,
            components: 8,
            ode_hidden: [16, 16],
            sample_time: 0.2,
            history: 15,
            horizon: 25,
            use_encoder_gnn: true,
            use_decoder_gnn: true,
            use_ekf: true,
            use_ode: true,
            use_static: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_ekf && !self.use_ode {
            return Err(Error::Config("use_ekf requires use_ode: the covariance update needs the motion model".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("at least one mixture component is required".into()));
        }
        if self.hidden == 0 || self.heads == 0 || self.gnn_depth == 0 {
            return Err(Error::Config("hidden width, heads and gnn depth must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::Config("sample time must be positive".into()));
        }
        if !(self.slope >= 0.0) {
            return Err(Error::Config("leaky slope must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of one fed-back state.
    pub fn state_dim(&self) -> usize {
        if self.use_ode {
            self.order.state_dim()
        } else {
            2
        }
    }

    fn gnn_config(&self) -> GnnConfig {
        GnnConfig { kind: self.gnn, depth: self.gnn_depth, hidden: self.hidden, heads: self.heads, slope: self.slope }
    }
}

/// Per-feature standardisation fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer { mean: [0.0; FEATURE_DIM], std: [1.0; FEATURE_DIM] }
    }
}

impl Normalizer {
    /// Mean and standard deviation of every observed feature vector.
    pub fn fit<'a>(scenes: impl IntoIterator<Item = &'a SceneSequence>) -> Self {
        let mut sum = [0.0; FEATURE_DIM];
        let mut sq = [0.0; FEATURE_DIM];
        let mut n = 0usize;
        for s in scenes {
            for a in &s.agents {
                for o in a.history.iter().flatten() {
                    let f = o.features();
                    for i in 0..FEATURE_DIM {
                        sum[i] += f[i];
                        sq[i] += f[i] * f[i];
                    }
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Normalizer::default();
        }
        let mut out = Normalizer::default();
        for i in 0..FEATURE_DIM {
            let m = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - m * m).max(0.0);
            out.mean[i] = m;
            out.std[i] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, f: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            out[i] = (f[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// How the decoder receives the previous state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Ground truth where available, the model's own state otherwise.
    TeacherForcing,
    Rollout,
}

/// Weighted edges of one step over the whole batch.
#[derive(Clone, Debug)]
struct StepEdges {
    topology: GraphTopology,
    /// Squared edge lengths, `E × 1`.
    dist_sq: Tensor,
}

impl StepEdges {
    fn new(n: usize, pairs: Vec<(usize, usize)>, dist: Vec<f64>, with_edges: bool) -> Self {
        if !with_edges {
            return StepEdges { topology: GraphTopology::isolated(n), dist_sq: Tensor::zeros(0, 1) };
        }
        let sq: Vec<f64> = dist.iter().map(|d| d * d).collect();
        StepEdges { topology: GraphTopology::new(n, &pairs), dist_sq: Tensor::col_vector(&sq) }
    }
}

/// Scenes stacked into one disjoint-union graph with precomputed inputs.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub agents: usize,
    /// First agent row of each scene.
    pub offsets: Vec<usize>,
    inputs: Vec<Tensor>,
    present: Vec<Tensor>,
    encoder_edges: Vec<StepEdges>,
    decoder_edges: StepEdges,
    mask: Vec<bool>,
    /// `N × 4` current `(x, y, vx, vy)`.
    current: Tensor,
    /// `N × CATEGORY_COUNT`.
    statics: Tensor,
    /// Per horizon step, per agent truth `(x, y, vx, vy)`.
    truth: Vec<Vec<Option<[f64; 4]>>>,
    pub full_future: Vec<bool>,
}

impl PreparedBatch {
    pub fn horizon(&self) -> usize {
        self.truth.len()
    }

    pub fn loss_agents(&self) -> usize {
        self.full_future.iter().filter(|&&f| f).count()
    }

    /// Stacked true positions and per-agent weights `1/(n_valid·t_f)`.
    pub fn stacked_truth(&self) -> StackedTruth {
        let n = self.agents;
        let tf = self.horizon();
        let valid = self.loss_agents();
        let mut pos = Vec::with_capacity(tf * n * 2);
        for step in &self.truth {
            for (a, t) in step.iter().enumerate() {
                match (t, self.full_future[a]) {
                    (Some(s), true) => pos.extend_from_slice(&s[..2]),
                    _ => pos.extend_from_slice(&[0.0, 0.0]),
                }
            }
        }
        let w = if valid == 0 { 0.0 } else { 1.0 / (valid * tf) as f64 };
        StackedTruth {
            positions: Tensor::from_vec(tf * n, 2, pos),
            agent_weight: self.full_future.iter().map(|&f| if f { w } else { 0.0 }).collect(),
        }
    }
}

/// Counters collected during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub integrator_calls: usize,
    pub covariance: CovarianceStats,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub forecast: StackedForecast,
    /// Decoder attention per horizon step, `N × L`.
    pub attention: Vec<Var>,
    pub stats: ForwardStats,
}

/// A model instance: configuration, parameters and input statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub normalizer: Normalizer,
    encoder: Encoder,
    decoder: Decoder,
    motion: Option<MotionModel>,
    sigma_e: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let gnn = config.gnn_config();
        let encoder = Encoder::new(&mut params, &gnn, FEATURE_DIM, config.hidden, &mut rng);
        let shape = DecoderShape {
            hidden: config.hidden,
            components: config.components,
            state_dim: config.state_dim(),
            memory_len: config.history + 1,
            slope: config.slope,
        };
        let decoder = Decoder::new(&mut params, &gnn, shape, &mut rng);
        let motion = if config.use_ode {
            let mut m = MotionModel::new(
                &mut params,
                MotionConfig { order: config.order, hidden: config.ode_hidden, use_static: config.use_static },
                &mut rng,
            );
            let off = match config.order {
                MotionOrder::First => 0,
                MotionOrder::Second => 2,
            };
            m.scaling = InputScaling {
                shift: [normalizer.mean[off], normalizer.mean[off + 1]],
                scale: [1.0 / normalizer.std[off], 1.0 / normalizer.std[off + 1]],
            };
            Some(m)
        } else {
            None
        };
        let sigma_e = params.insert("model.sigma_e", Tensor::scalar(DEFAULT_SIGMA_E));
        Ok(Model { config, params, normalizer, encoder, decoder, motion, sigma_e })
    }

    pub fn motion(&self) -> Option<&MotionModel> {
        self.motion.as_ref()
    }

    /// Stacks scenes into one batch. Scene shapes must match the configured
    /// history and horizon.
    pub fn prepare(&self, scenes: &[&SceneSequence]) -> Result<PreparedBatch> {
        let cfg = &self.config;
        let steps = cfg.history + 1;
        if scenes.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut offsets = Vec::with_capacity(scenes.len());
        let mut n = 0;
        for s in scenes {
            if s.history_len() != steps || s.horizon() != cfg.horizon {
                return Err(Error::Shape(format!(
                    "scene at frame {} has {} history and {} future steps, model expects {} and {}",
                    s.frame,
                    s.history_len(),
                    s.horizon(),
                    steps,
                    cfg.horizon
                )));
            }
            if (s.sample_time - cfg.sample_time).abs() > 1e-9 {
                return Err(Error::Shape(format!("scene sample time {} differs from model {}", s.sample_time, cfg.sample_time)));
            }
            offsets.push(n);
            n += s.num_agents();
        }
        let agents: Vec<_> = scenes.iter().flat_map(|s| s.agents.iter()).collect();
        let mut inputs = Vec::with_capacity(steps);
        let mut present = Vec::with_capacity(steps);
        let mut encoder_edges = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut x = Tensor::zeros(n, FEATURE_DIM);
            let mut pr = Tensor::zeros(n, 1);
            for (r, a) in agents.iter().enumerate() {
                if let Some(o) = &a.history[i] {
                    let f = self.normalizer.apply(&o.features());
                    for (c, v) in f.iter().enumerate() {
                        x.set(r, c, *v);
                    }
                    pr.set(r, 0, 1.0);
                }
            }
            inputs.push(x);
            present.push(pr);
            let (pairs, dist) = batch_edges(scenes, &offsets, |s| &s.graphs[i]);
            encoder_edges.push(StepEdges::new(n, pairs, dist, cfg.use_encoder_gnn));
        }
        let (pairs, dist) = batch_edges(scenes, &offsets, |s| s.last_graph());
        let decoder_edges = StepEdges::new(n, pairs, dist, cfg.use_decoder_gnn);
        let mask: Vec<bool> = agents.iter().flat_map(|a| a.history_mask()).collect();
        let mut current = Tensor::zeros(n, 4);
        let mut statics = Tensor::zeros(n, CATEGORY_COUNT);
        for (r, a) in agents.iter().enumerate() {
            let o = a.current().ok_or_else(|| Error::Invalid(format!("agent {} absent at prediction instant", a.id.0)))?;
            for (c, v) in [o.node.x, o.node.y, o.node.vx, o.node.vy].into_iter().enumerate() {
                current.set(r, c, v);
            }
            statics.set(r, a.category.index(), 1.0);
        }
        let truth = (0..cfg.horizon)
            .map(|k| agents.iter().map(|a| a.future[k].map(|f| [f.x, f.y, f.vx, f.vy])).collect())
            .collect();
        let full_future = agents.iter().map(|a| a.has_full_future()).collect();
        Ok(PreparedBatch {
            agents: n,
            offsets,
            inputs,
            present,
            encoder_edges,
            decoder_edges,
            mask,
            current,
            statics,
            truth,
            full_future,
        })
    }

    fn weighted<'a>(&self, g: &Graph, p: &BoundParams, e: &'a StepEdges) -> GraphBatch<'a> {
        if e.topology.num_undirected == 0 {
            return GraphBatch::new(g, &e.topology, g.constant(Tensor::zeros(0, 1)));
        }
        let rows = e.dist_sq.rows();
        let sigma = g.broadcast(p.var(self.sigma_e), rows, 1);
        let w = g.exp(g.neg(g.div(g.constant(e.dist_sq.clone()), g.square(sigma))));
        GraphBatch::new(g, &e.topology, w)
    }

    /// Normalised states `R × d_s` reshaped to `N × (M·d_s)`.
    fn embed_input(&self, g: &Graph, states: Var, n: usize) -> Var {
        let ds = self.config.state_dim();
        let r = g.shape(states).0;
        let mean = Tensor::from_vec(1, ds, self.normalizer.mean[..ds].to_vec());
        let inv: Vec<f64> = self.normalizer.std[..ds].iter().map(|s| 1.0 / s).collect();
        let z = g.sub(states, g.broadcast(g.constant(mean), r, ds));
        let z = g.mul(z, g.broadcast(g.constant(Tensor::from_vec(1, ds, inv)), r, ds));
        g.reshape(z, n, self.config.components * ds)
    }

    /// Runs encoder, decoder, motion model and covariance propagation.
    pub fn forward(&self, g: &Graph, p: &BoundParams, batch: &PreparedBatch, mode: DecodeMode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = batch.agents;
        let m = cfg.components;
        let rows = n * m;
        let ds = cfg.state_dim();
        let steps: Vec<EncoderStep<'_>> = (0..batch.inputs.len())
            .map(|i| EncoderStep {
                input: g.constant(batch.inputs[i].clone()),
                batch: self.weighted(g, p, &batch.encoder_edges[i]),
                present: g.constant(batch.present[i].clone()),
            })
            .collect();
        let memory: EncoderMemory = self.encoder.encode(g, p, &steps, batch.mask.clone());
        let dec_batch = self.weighted(g, p, &batch.decoder_edges);

        let logits = self.decoder.mixture_logits(g, p, memory.last);
        let lse = g.broadcast(g.row_logsumexp(logits), n, m);
        let log_pi = g.sub(logits, lse);

        let tile: Rc<[usize]> = (0..rows).map(|r| r / m).collect();
        let current = g.gather_rows(g.constant(batch.current.clone()), tile.clone());
        let statics = cfg.use_static.then(|| g.gather_rows(g.constant(batch.statics.clone()), tile.clone()));
        let start_pos = g.slice_cols(current, 0, 2);
        let mut state = if ds == 4 { current } else { start_pos };
        let mut cov_state = g.constant(Tensor::zeros(rows, ds * ds));
        let mut prev_states = self.embed_input(g, state, n);
        let mut h = memory.last;
        let mut stats = ForwardStats::default();
        let mut means = Vec::with_capacity(cfg.horizon);
        let mut covs = Vec::with_capacity(cfg.horizon);
        let mut attention = Vec::with_capacity(cfg.horizon);
        for k in 0..cfg.horizon {
            let out = self.decoder.step(g, p, dec_batch, &memory, h, prev_states);
            h = out.hidden;
            attention.push(out.attention);
            let raw = g.reshape(out.raw, rows, RAW_PER_COMPONENT);
            let u = g.slice_cols(raw, 0, 2);
            let q = process_noise(g, g.slice_cols(raw, 2, 3));
            let cov = match &self.motion {
                Some(motion) => {
                    let res = motion.step(g, p, state, u, statics, cfg.sample_time, cfg.use_ekf);
                    stats.integrator_calls += 1;
                    state = res.next;
                    match res.jacobian {
                        Some(f) => {
                            cov_state = ekf_time_update(g, cov_state, f, q, cfg.sample_time, ds, &mut stats.covariance)?;
                            position_block(g, cov_state, ds)
                        }
                        None => q,
                    }
                }
                None => {
                    state = g.add(start_pos, g.scale(u, MDN_OFFSET_SCALE));
                    q
                }
            };
            means.push(g.slice_cols(state, 0, 2));
            covs.push(cov);
            if k + 1 < cfg.horizon {
                let fed = match mode {
                    DecodeMode::Rollout => state,
                    DecodeMode::TeacherForcing => {
                        let mut truth = Tensor::zeros(rows, ds);
                        let mut keep = Tensor::zeros(rows, ds);
                        for r in 0..rows {
                            match batch.truth[k][r / m] {
                                Some(t) => (0..ds).for_each(|c| truth.set(r, c, t[c])),
                                None => (0..ds).for_each(|c| keep.set(r, c, 1.0)),
                            }
                        }
                        g.add(g.constant(truth), g.mul(state, g.constant(keep)))
                    }
                };
                prev_states = self.embed_input(g, fed, n);
            }
        }
        let forecast = StackedForecast {
            log_pi,
            means: g.concat_rows(&means),
            covs: g.concat_rows(&covs),
            agents: n,
            components: m,
            horizon: cfg.horizon,
        };
        Ok(ForwardOutput { forecast, attention, stats })
    }

    /// Scheduled training objective for one batch.
    pub fn loss(&self, g: &Graph, out: &ForwardOutput, batch: &PreparedBatch, recipe: LossRecipe, delta: f64) -> Var {
        let truth = batch.stacked_truth();
        let (w_ewta, w_nll, k) = recipe.weights();
        let mut terms = Vec::new();
        if w_ewta > 0.0 {
            terms.push(g.scale(ewta_loss_graph(g, &out.forecast, &truth, k, delta), w_ewta));
        }
        if w_nll > 0.0 {
            terms.push(g.scale(gmm_nll_graph(g, &out.forecast, &truth), w_nll));
        }
        terms.into_iter().reduce(|a, b| g.add(a, b)).unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
    }

    /// Rollout forecasts, one list of per-agent mixtures per scene.
    pub fn predict(&self, scenes: &[&SceneSequence]) -> Result<Vec<Vec<GmmForecast>>> {
        let batch = self.prepare(scenes)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.forward(&g, &p, &batch, DecodeMode::Rollout)?;
        if let Some(bad) = g.first_non_finite() {
            return Err(Error::NonFinite { op: bad.op.to_string(), node: bad.node });
        }
        let all = extract_forecasts(&g, &out.forecast);
        let mut per_scene = Vec::with_capacity(scenes.len());
        let mut it = all.into_iter();
        for s in scenes {
            per_scene.push(it.by_ref().take(s.num_agents()).collect());
        }
        Ok(per_scene)
    }
}

fn batch_edges<'s>(
    scenes: &[&'s SceneSequence],
    offsets: &[usize],
    graph: impl Fn(&'s SceneSequence) -> &'s StepGraph,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs = Vec::new();
    let mut dist = Vec::new();
    for (s, &off) in scenes.iter().zip(offsets) {
        for e in &graph(s).edges {
            pairs.push((e.a + off, e.b + off));
            dist.push(e.distance);
        }
    }
    (pairs, dist)
}

/// Converts a stacked forecast into per-agent mixtures.
pub fn extract_forecasts(g: &Graph, f: &StackedForecast) -> Vec<GmmForecast> {
    let (n, m, tf) = (f.agents, f.components, f.horizon);
    let log_pi = g.value(f.log_pi).clone();
    let means = g.value(f.means).clone();
    let covs = g.value(f.covs).clone();
    (0..n)
        .map(|a| {
            let pi: Vec<f64> = log_pi.row(a).iter().map(|v| v.exp()).collect();
            let row = |k: usize, j: usize| k * n * m + a * m + j;
            GmmForecast {
                pi,
                means: (0..m).map(|j| (0..tf).map(|k| [means.get(row(k, j), 0), means.get(row(k, j), 1)]).collect()).collect(),
                covs: (0..m)
                    .map(|j| {
                        (0..tf)
                            .map(|k| {
                                let c = covs.row(row(k, j));
                                [c[0], c[1], c[2], c[3]]
                            })
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{downsample, generate_synthetic, window_scenes, SyntheticKind, WindowConfig};
    use crate::diffcore::{compare_gradients, evaluate_with_gradients, finite_difference_oracle, scaled_floor};
    use crate::mixture::gmm_nll;

    /// Breaks the exact ties between components of a fresh model.
    fn jitter(params: &mut ParameterSet, scale: f64, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = params.flatten().iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
        params.unflatten(&flat).unwrap();
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig { hidden: 6, components: 2, history: 4, horizon: 3, ode_hidden: [4, 4], ..ModelConfig::default() }
    }

    fn scenes(kind: SyntheticKind, history: usize, horizon: usize, count: usize) -> Vec<SceneSequence> {
        let t = downsample(&generate_synthetic(kind, count, 4).unwrap(), 5).unwrap();
        let cfg = WindowConfig { history, horizon, stride: 10, ..WindowConfig::default() };
        window_scenes(&t, &cfg).unwrap()
    }

    fn run(model: &Model, scenes: &[&SceneSequence], mode: DecodeMode) -> (Vec<GmmForecast>, ForwardStats) {
        let batch = model.prepare(scenes).unwrap();
        let g = Graph::new();
        let p = model.params.bind_constant(&g);
        let out = model.forward(&g, &p, &batch, mode).unwrap();
        (extract_forecasts(&g, &out.forecast), out.stats)
    }

    #[test]
    fn use_ekf_without_ode_is_rejected() {
        let cfg = ModelConfig { use_ode: false, ..ModelConfig::default() };
        assert!(matches!(Model::new(cfg, Normalizer::default(), 0), Err(Error::Config(_))));
        let cfg = ModelConfig { use_ode: false, use_ekf: false, ..ModelConfig::default() };
        assert!(Model::new(cfg, Normalizer::default(), 0).is_ok());
    }

    #[test]
    fn output_shapes_and_distributions() {
        let sc = scenes(SyntheticKind::Roundabout, 4, 3, 2);
        let refs: Vec<&SceneSequence> = sc.iter().take(3).collect();
        let model = Model::new(tiny_config(), Normalizer::fit(sc.iter()), 1).unwrap();
        let (f, stats) = run(&model, &refs, DecodeMode::Rollout);
        let agents: usize = refs.iter().map(|s| s.num_agents()).sum();
        assert_eq!(f.len(), agents);
        for a in &f {
            assert_eq!(a.components(), 2);
            assert_eq!(a.horizon(), 3);
            assert!((a.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(stats.integrator_calls, 3);
        assert_eq!(stats.covariance.updates, 3 * agents * 2);
        assert!(stats.covariance.min_eigenvalue >= -1e-10);
    }

    #[test]
    fn untrained_second_order_model_follows_constant_velocity() {
        let sc = scenes(SyntheticKind::Highway, 4, 3, 1);
        let model = Model::new(tiny_config(), Normalizer::fit(sc.iter()), 1).unwrap();
        let (f, _) = run(&model, &[&sc[0]], DecodeMode::Rollout);
        for (a, fc) in sc[0].agents.iter().zip(&f) {
            let o = a.current().unwrap().node;
            for (k, mean) in fc.means[0].iter().enumerate() {
                let t = (k + 1) as f64 * 0.2;
                assert!((mean[0] - (o.x + t * o.vx)).abs() < 1e-9);
                assert!((mean[1] - (o.y + t * o.vy)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mdn_ablation_has_no_integrator_calls() {
        let sc = scenes(SyntheticKind::Fork, 4, 3, 2);
        let cfg = ModelConfig { use_ode: false, use_ekf: false, ..tiny_config() };
        let model = Model::new(cfg, Normalizer::fit(sc.iter()), 2).unwrap();
        assert!(model.motion().is_none());
        assert!(model.params.iter().all(|(name, _)| !name.starts_with("motion.")));
        let (f, stats) = run(&model, &[&sc[0], &sc[1]], DecodeMode::Rollout);
        assert_eq!(stats.integrator_calls, 0);
        assert_eq!(stats.covariance.updates, 0);
        assert_eq!(f[0].horizon(), 3);
        assert_eq!(f[0].components(), 2);
    }

    #[test]
    fn teacher_forcing_equals_rollout_for_one_step() {
        let sc = scenes(SyntheticKind::Roundabout, 4, 1, 1);
        let cfg = ModelConfig { horizon: 1, ..tiny_config() };
        let model = Model::new(cfg, Normalizer::fit(sc.iter()), 3).unwrap();
        let (a, _) = run(&model, &[&sc[0]], DecodeMode::TeacherForcing);
        let (b, _) = run(&model, &[&sc[0]], DecodeMode::Rollout);
        assert_eq!(a, b);
    }

    #[test]
    fn batching_matches_single_scene_forward() {
        let sc = scenes(SyntheticKind::Roundabout, 4, 3, 2);
        let model = Model::new(tiny_config(), Normalizer::fit(sc.iter()), 4).unwrap();
        let (joint, _) = run(&model, &[&sc[0], &sc[1]], DecodeMode::Rollout);
        let (a, _) = run(&model, &[&sc[0]], DecodeMode::Rollout);
        let (b, _) = run(&model, &[&sc[1]], DecodeMode::Rollout);
        let separate: Vec<GmmForecast> = a.into_iter().chain(b).collect();
        for (x, y) in joint.iter().zip(&separate) {
            for j in 0..2 {
                for k in 0..3 {
                    for c in 0..2 {
                        assert!((x.means[j][k][c] - y.means[j][k][c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_matches_scalar_nll() {
        let sc = scenes(SyntheticKind::Fork, 4, 3, 2);
        let model = Model::new(tiny_config(), Normalizer::fit(sc.iter()), 5).unwrap();
        let refs = [&sc[0], &sc[1]];
        let batch = model.prepare(&refs).unwrap();
        let g = Graph::new();
        let p = model.params.bind_constant(&g);
        let out = model.forward(&g, &p, &batch, DecodeMode::TeacherForcing).unwrap();
        let loss = g.item(model.loss(&g, &out, &batch, LossRecipe::Nll, 1.0));
        let forecasts = extract_forecasts(&g, &out.forecast);
        let mut total = 0.0;
        let mut count = 0;
        for (a, f) in refs.iter().flat_map(|s| s.agents.iter()).zip(&forecasts) {
            if a.has_full_future() {
                let truth: Vec<[f64; 2]> = a.future.iter().map(|s| [s.unwrap().x, s.unwrap().y]).collect();
                total += gmm_nll(f, &truth).unwrap();
                count += 1;
            }
        }
        let expected = total / (count * 3) as f64;
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn full_pipeline_gradients_match_oracle() {
        let sc = scenes(SyntheticKind::Roundabout, 4, 2, 1);
        let cfg = ModelConfig { hidden: 4, components: 2, history: 4, horizon: 2, ode_hidden: [3, 3], ..ModelConfig::default() };
        let mut model = Model::new(cfg, Normalizer::fit(sc.iter()), 6).unwrap();
        jitter(&mut model.params, 0.1, 7);
        let batch = model.prepare(&[&sc[0]]).unwrap();
        let loss_fn = |g: &Graph, p: &BoundParams| {
            let out = model.forward(g, p, &batch, DecodeMode::TeacherForcing)?;
            Ok(model.loss(g, &out, &batch, LossRecipe::Blend { beta: 0.5 }, 1.0))
        };
        let (_, analytic) = evaluate_with_gradients(loss_fn, &model.params).unwrap();
        let numeric = finite_difference_oracle(loss_fn, &model.params, 1e-5).unwrap();
        let cmp = compare_gradients(&analytic, &numeric, scaled_floor(&analytic, 1e-4));
        assert!(cmp.passes(1e-4), "{cmp:?}");
    }
}
