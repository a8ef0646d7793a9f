//! Traffic scenes as sequences of complete agent graphs with per-agent
//! node, context and static features.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default kernel bandwidth in metres.
pub const DEFAULT_SIGMA_E: f64 = 10.0;
/// Node features per step: x, y, vx, vy, ax, ay, psi.
pub const NODE_FEATURES: usize = 7;
/// Context features per step: (d_l, d_r) or (r, theta).
pub const CONTEXT_FEATURES: usize = 2;
/// Width of an assembled feature vector.
pub const FEATURE_DIM: usize = NODE_FEATURES + CONTEXT_FEATURES;
pub const CATEGORY_COUNT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentCategory {
    Pedestrian,
    Bicycle,
    Car,
    Bus,
    Truck,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; CATEGORY_COUNT] = [
        AgentCategory::Pedestrian,
        AgentCategory::Bicycle,
        AgentCategory::Car,
        AgentCategory::Bus,
        AgentCategory::Truck,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; CATEGORY_COUNT] {
        let mut v = [0.0; CATEGORY_COUNT];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentCategory::Pedestrian => "pedestrian",
            AgentCategory::Bicycle => "bicycle",
            AgentCategory::Car => "car",
            AgentCategory::Bus => "bus",
            AgentCategory::Truck => "truck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s.trim().to_ascii_lowercase())
    }
}

/// Time-varying kinematic features, positions relative to the scene origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub psi: f64,
}

impl NodeFeatures {
    pub fn to_array(&self) -> [f64; NODE_FEATURES] {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay, self.psi]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Highway,
    Junction,
}

/// Scene-specific positional context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContextFeatures {
    /// Lane and road offsets, each in [-1, 1] when the lane geometry is valid.
    Lane { d_l: f64, d_r: f64 },
    /// Distance and bearing from the scene origin.
    Polar { r: f64, theta: f64 },
}

impl ContextFeatures {
    pub fn kind(&self) -> SceneKind {
        match self {
            ContextFeatures::Lane { .. } => SceneKind::Highway,
            ContextFeatures::Polar { .. } => SceneKind::Junction,
        }
    }

    pub fn to_array(&self) -> [f64; CONTEXT_FEATURES] {
        match *self {
            ContextFeatures::Lane { d_l, d_r } => [d_l, d_r],
            ContextFeatures::Polar { r, theta } => [r, theta],
        }
    }
}

/// `exp(−(d/σ)²)`.
pub fn kernel_weight(distance: f64, sigma_e: f64) -> f64 {
    let q = distance / sigma_e;
    (-q * q).exp()
}

/// Lateral offset from the current lane centre, −1 at the left divider and
/// +1 at the right one.
pub fn lane_offset(y: f64, y0: f64, lane_left: f64, lane_width: f64) -> f64 {
    2.0 * (y + y0 - lane_left) / lane_width - 1.0
}

/// Polar coordinates of an agent about the origin `(x0, y0)`.
pub fn polar_context(x: f64, y: f64, x0: f64, y0: f64) -> (f64, f64) {
    let r = ((x0 - x).powi(2) + (y0 - y).powi(2)).sqrt();
    let theta = (y0 - y).atan2(x - x0);
    (r, theta)
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Canonical ordering: x, y, vx, vy, ax, ay, psi, then the two context
/// features.
pub fn assemble_feature_vector(node: &NodeFeatures, ctx: &ContextFeatures) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    out[..NODE_FEATURES].copy_from_slice(&node.to_array());
    out[NODE_FEATURES..].copy_from_slice(&ctx.to_array());
    out
}

/// Assembles feature vectors for one scene, rejecting mixed context kinds.
pub fn assemble_scene_features(obs: &[(NodeFeatures, ContextFeatures)]) -> Result<Vec<[f64; FEATURE_DIM]>> {
    if let Some((_, first)) = obs.first() {
        let kind = first.kind();
        if obs.iter().any(|(_, c)| c.kind() != kind) {
            return Err(Error::Invalid("mixed context kinds in one scene".into()));
        }
    }
    Ok(obs.iter().map(|(n, c)| assemble_feature_vector(n, c)).collect())
}

/// An undirected edge between two node indices (`a < b`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Complete undirected graph over agents with Euclidean edge distances.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoGraph {
    pub center: usize,
    pub edges: Vec<Edge>,
    /// Row-major `n × n` distance matrix.
    pub distances: Vec<f64>,
    pub n: usize,
}

impl EgoGraph {
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distances[a * self.n + b]
    }
}

pub fn distance(p: [f64; 2], q: [f64; 2]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Builds the complete graph around `center`.
pub fn build_ego_graph(agents: &[(AgentId, [f64; 2])], center: AgentId) -> Result<EgoGraph> {
    if agents.is_empty() {
        return Err(Error::Invalid("ego graph needs at least one agent".into()));
    }
    let center = agents
        .iter()
        .position(|(id, _)| *id == center)
        .ok_or_else(|| Error::Invalid(format!("center agent {} not in scene", center.0)))?;
    let n = agents.len();
    let mut distances = vec![0.0; n * n];
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let d = distance(agents[a].1, agents[b].1);
            distances[a * n + b] = d;
            distances[b * n + a] = d;
            edges.push(Edge { a, b, distance: d });
        }
    }
    Ok(EgoGraph {
        center,
        edges,
        distances,
        n,
    })
}

/// Complete graph over the listed node indices of a scene's node universe.
pub fn complete_edges(nodes: &[usize], positions: &[[f64; 2]]) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1) / 2);
    for (i, &a) in nodes.iter().enumerate() {
        for &b in &nodes[i + 1..] {
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            edges.push(Edge {
                a,
                b,
                distance: distance(positions[a], positions[b]),
            });
        }
    }
    edges
}

/// One observed step of one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub node: NodeFeatures,
    pub context: ContextFeatures,
}

impl Observation {
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        assemble_feature_vector(&self.node, &self.context)
    }
}

/// Ground-truth future kinematic state (position and velocity).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

/// An agent present at the prediction instant, with its windowed history
/// and (when available) future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: AgentId,
    pub category: AgentCategory,
    /// One entry per history step; `None` where the agent was not observed.
    pub history: Vec<Option<Observation>>,
    /// One entry per horizon step; `None` past the end of the recording.
    pub future: Vec<Option<FutureState>>,
}

impl AgentTrack {
    pub fn history_mask(&self) -> Vec<bool> {
        self.history.iter().map(Option::is_some).collect()
    }

    pub fn has_full_future(&self) -> bool {
        !self.future.is_empty() && self.future.iter().all(Option::is_some)
    }

    /// Last observed node features (the prediction instant).
    pub fn current(&self) -> Option<&Observation> {
        self.history.last().and_then(Option::as_ref)
    }
}

/// Graph of one history step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepGraph {
    /// Agents (indices into [`SceneSequence::agents`]) present at this step.
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
}

/// A windowed traffic situation: per-step graphs and per-agent feature
/// histories for the agents present at the prediction instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub kind: SceneKind,
    pub sample_time: f64,
    pub origin: [f64; 2],
    /// Frame number of the prediction instant in the source table.
    pub frame: i64,
    pub center: AgentId,
    pub agents: Vec<AgentTrack>,
    pub graphs: Vec<StepGraph>,
}

impl SceneSequence {
    pub fn history_len(&self) -> usize {
        self.graphs.len()
    }

    pub fn horizon(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Graph at the prediction instant.
    pub fn last_graph(&self) -> &StepGraph {
        self.graphs.last().expect("scene without history steps")
    }

    /// Builds step graphs from the agents' histories.
    pub fn rebuild_graphs(&mut self) {
        let steps = self.agents.first().map_or(0, |a| a.history.len());
        self.graphs = (0..steps)
            .map(|i| {
                let nodes: Vec<usize> = (0..self.agents.len())
                    .filter(|&a| self.agents[a].history[i].is_some())
                    .collect();
                let positions: Vec<[f64; 2]> = self
                    .agents
                    .iter()
                    .map(|a| a.history[i].map_or([0.0, 0.0], |o| o.node.position()))
                    .collect();
                let edges = complete_edges(&nodes, &positions);
                StepGraph { nodes, edges }
            })
            .collect();
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0) {
            return Err(Error::Invalid("sample time must be positive".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Invalid("scene has no agents".into()));
        }
        let steps = self.graphs.len();
        if steps == 0 {
            return Err(Error::Invalid("scene has no history steps".into()));
        }
        let horizon = self.horizon();
        let mut ids: Vec<AgentId> = self.agents.iter().map(|a| a.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.agents.len() {
            return Err(Error::Invalid("duplicate agent id in scene".into()));
        }
        let kind = self.kind;
        for a in &self.agents {
            if a.history.len() != steps || a.future.len() != horizon {
                return Err(Error::Invalid(format!("agent {} has ragged history/future", a.id.0)));
            }
            if a.current().is_none() {
                return Err(Error::Invalid(format!(
                    "agent {} is not observed at the prediction instant",
                    a.id.0
                )));
            }
            for o in a.history.iter().flatten() {
                if !o.node.to_array().iter().chain(&o.context.to_array()).all(|v| v.is_finite()) {
                    return Err(Error::Invalid(format!("agent {} has non-finite features", a.id.0)));
                }
                if !(o.node.psi > -PI && o.node.psi <= PI) {
                    return Err(Error::Invalid(format!("agent {} yaw outside (-pi, pi]", a.id.0)));
                }
                if o.context.kind() != kind {
                    return Err(Error::Invalid("mixed context kinds in one scene".into()));
                }
            }
        }
        for (i, g) in self.graphs.iter().enumerate() {
            let n = g.nodes.len();
            if g.edges.len() != n * n.saturating_sub(1) / 2 {
                return Err(Error::Invalid(format!("graph at step {i} is not complete")));
            }
            for e in &g.edges {
                if e.a == e.b || !(e.distance >= 0.0) {
                    return Err(Error::Invalid(format!("bad edge at step {i}")));
                }
                let (pa, pb) = match (&self.agents[e.a].history[i], &self.agents[e.b].history[i]) {
                    (Some(pa), Some(pb)) => (pa.node.position(), pb.node.position()),
                    _ => return Err(Error::Invalid(format!("edge to absent agent at step {i}"))),
                };
                if (distance(pa, pb) - e.distance).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("edge distance mismatch at step {i}")));
                }
            }
        }
        Ok(())
    }
}
