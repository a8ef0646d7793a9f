//! Graph layers used inside the graph-GRU cells: GraphConv, GCN, GATv2-style
//! attention and GAT+ (attention plus a separate centre-node transform).
//!
//! All layers take edge weights in (0, 1]. Graphs are stored as directed
//! pairs (both directions of every undirected edge); self loops are added
//! internally where a layer aggregates over the inclusive neighbourhood.

use crate::diffcore::{BoundParams, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::scenegraph::Edge;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    GraphConv,
    Gcn,
    Gat,
    GatPlus,
}

impl GnnKind {
    pub fn uses_attention(self) -> bool {
        matches!(self, GnnKind::Gat | GnnKind::GatPlus)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "graphconv" => Some(GnnKind::GraphConv),
            "gcn" => Some(GnnKind::Gcn),
            "gat" => Some(GnnKind::Gat),
            "gatplus" | "gat+" => Some(GnnKind::GatPlus),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadCombine {
    Concatenate,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnLayerConfig {
    pub kind: GnnKind,
    pub in_dim: usize,
    /// Per-head output width.
    pub out_dim: usize,
    pub heads: usize,
    pub combine: HeadCombine,
    /// Negative slope of the leaky ReLU inside attention scoring.
    pub slope: f64,
}

impl GnnLayerConfig {
    pub fn output_width(&self) -> usize {
        match (self.kind.uses_attention(), self.combine) {
            (true, HeadCombine::Concatenate) => self.heads * self.out_dim,
            _ => self.out_dim,
        }
    }

    fn effective_heads(&self) -> usize {
        if self.kind.uses_attention() {
            self.heads
        } else {
            1
        }
    }
}

/// Directed-pair topology of a graph over `n` nodes.
#[derive(Clone, Debug)]
pub struct GraphTopology {
    pub n: usize,
    /// Source of each directed pair; both directions of every edge.
    pub src: Rc<[usize]>,
    pub tgt: Rc<[usize]>,
    /// Undirected edge index of each directed pair.
    pub undirected: Rc<[usize]>,
    /// Same pairs followed by one self loop per node.
    pub src_incl: Rc<[usize]>,
    pub tgt_incl: Rc<[usize]>,
    /// `1/|N(v)|`, zero for isolated nodes.
    pub inv_degree: Tensor,
    pub num_undirected: usize,
}

impl GraphTopology {
    /// Topology from undirected node pairs.
    pub fn new(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut src = Vec::with_capacity(2 * pairs.len() + n);
        let mut tgt = Vec::with_capacity(2 * pairs.len() + n);
        let mut und = Vec::with_capacity(2 * pairs.len());
        let mut degree = vec![0usize; n];
        for (k, &(a, b)) in pairs.iter().enumerate() {
            assert!(a < n && b < n && a != b, "invalid edge ({a}, {b}) for {n} nodes");
            src.extend([a, b]);
            tgt.extend([b, a]);
            und.extend([k, k]);
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut src_incl = src.clone();
        let mut tgt_incl = tgt.clone();
        src_incl.extend(0..n);
        tgt_incl.extend(0..n);
        let inv: Vec<f64> = degree
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
            .collect();
        Self {
            n,
            src: src.into(),
            tgt: tgt.into(),
            undirected: und.into(),
            src_incl: src_incl.into(),
            tgt_incl: tgt_incl.into(),
            inv_degree: Tensor::col_vector(&inv),
            num_undirected: pairs.len(),
        }
    }

    pub fn from_edges(n: usize, edges: &[Edge]) -> Self {
        let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.a, e.b)).collect();
        Self::new(n, &pairs)
    }

    /// A graph over `n` nodes with no edges.
    pub fn isolated(n: usize) -> Self {
        Self::new(n, &[])
    }

    pub fn num_directed(&self) -> usize {
        self.src.len()
    }
}

/// Node representations plus a weighted topology, ready for a layer.
#[derive(Clone, Copy)]
pub struct GraphBatch<'a> {
    pub topology: &'a GraphTopology,
    /// Weight per directed pair, `E_dir × 1`.
    pub weights: Var,
    /// Weight per inclusive pair (self loops weigh 1), `(E_dir + n) × 1`.
    pub weights_incl: Var,
}

impl<'a> GraphBatch<'a> {
    /// Expands undirected edge weights (`E × 1`) onto the directed pairs.
    pub fn new(g: &Graph, topology: &'a GraphTopology, undirected_weights: Var) -> Self {
        let weights = if topology.num_directed() == 0 {
            g.constant(Tensor::zeros(0, 1))
        } else {
            g.gather_rows(undirected_weights, topology.undirected.clone())
        };
        let ones = g.constant(Tensor::filled(topology.n, 1, 1.0));
        let weights_incl = if topology.num_directed() == 0 {
            ones
        } else {
            g.concat_rows(&[weights, ones])
        };
        Self {
            topology,
            weights,
            weights_incl,
        }
    }

    /// Constant weights, mostly for tests and standalone layer use.
    pub fn with_weights(g: &Graph, topology: &'a GraphTopology, undirected: &[f64]) -> Self {
        assert_eq!(undirected.len(), topology.num_undirected, "one weight per edge");
        let w = g.constant(Tensor::col_vector(undirected));
        Self::new(g, topology, w)
    }
}

/// Parameters of one attention head.
#[derive(Clone, Debug)]
struct HeadParams {
    w2: ParamId,
    /// Scoring matrix over `[h_v ‖ h_u ‖ w]`, `(2·in + 1) × out`.
    att_w: ParamId,
    /// Scoring vector, `out × 1`.
    att_a: ParamId,
}

/// One graph layer with its registered parameters.
#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub config: GnnLayerConfig,
    w1: Option<ParamId>,
    w2: Option<ParamId>,
    b: ParamId,
    heads: Vec<HeadParams>,
}

pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

impl GnnLayer {
    pub fn new(params: &mut ParameterSet, prefix: &str, config: GnnLayerConfig, rng: &mut impl Rng) -> Self {
        assert!(config.in_dim > 0 && config.out_dim > 0 && config.heads >= 1, "invalid layer config");
        let (i, o) = (config.in_dim, config.out_dim);
        let width = config.output_width();
        let w1 = match config.kind {
            GnnKind::GraphConv | GnnKind::GatPlus => {
                Some(params.insert(format!("{prefix}.w1"), glorot(rng, i, width)))
            }
            _ => None,
        };
        let w2 = match config.kind {
            GnnKind::GraphConv | GnnKind::Gcn => Some(params.insert(format!("{prefix}.w2"), glorot(rng, i, o))),
            _ => None,
        };
        let heads = if config.kind.uses_attention() {
            (0..config.heads)
                .map(|h| HeadParams {
                    w2: params.insert(format!("{prefix}.head{h}.w2"), glorot(rng, i, o)),
                    att_w: params.insert(format!("{prefix}.head{h}.att_w"), glorot(rng, 2 * i + 1, o)),
                    att_a: params.insert(format!("{prefix}.head{h}.att_a"), glorot(rng, o, 1)),
                })
                .collect()
        } else {
            Vec::new()
        };
        let b = params.insert(format!("{prefix}.b"), Tensor::zeros(1, width));
        Self { config, w1, w2, b, heads }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var) -> Var {
        match self.config.kind {
            GnnKind::GraphConv => self.graphconv(g, p, batch, h),
            GnnKind::Gcn => self.gcn(g, p, batch, h),
            GnnKind::Gat | GnnKind::GatPlus => self.gat(g, p, batch, h),
        }
    }

    fn bias(&self, g: &Graph, p: &BoundParams, n: usize) -> Var {
        g.broadcast(p.var(self.b), n, self.config.output_width())
    }

    fn graphconv(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var) -> Var {
        let topo = batch.topology;
        let n = topo.n;
        let center = g.matmul(h, p.var(self.w1.expect("graphconv w1")));
        let mut out = g.add(self.bias(g, p, n), center);
        if topo.num_directed() > 0 {
            let hw2 = g.matmul(h, p.var(self.w2.expect("graphconv w2")));
            let msg = g.mul_col(g.gather_rows(hw2, topo.src.clone()), batch.weights);
            let agg = g.scatter_rows(msg, topo.tgt.clone(), n);
            let inv = g.constant(topo.inv_degree.clone());
            out = g.add(out, g.mul_col(agg, inv));
        }
        out
    }

    fn gcn(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var) -> Var {
        let topo = batch.topology;
        let n = topo.n;
        let hw2 = g.matmul(h, p.var(self.w2.expect("gcn w2")));
        // d̂_v = 1 + Σ_{u∈N(v)} w_vu, the 1 coming from the self loop
        let dhat = g.scatter_rows(batch.weights_incl, topo.tgt_incl.clone(), n);
        let dt = g.gather_rows(dhat, topo.tgt_incl.clone());
        let ds = g.gather_rows(dhat, topo.src_incl.clone());
        let coeff = g.div(batch.weights_incl, g.sqrt(g.mul(dt, ds)));
        let msg = g.mul_col(g.gather_rows(hw2, topo.src_incl.clone()), coeff);
        let agg = g.scatter_rows(msg, topo.tgt_incl.clone(), n);
        g.add(self.bias(g, p, n), agg)
    }

    /// Attention weight of every inclusive pair for one head, `(E_dir + n) × 1`.
    /// Pair `k` is the weight node `tgt_incl[k]` gives to `src_incl[k]`.
    pub fn attention(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var, head: usize) -> Var {
        let topo = batch.topology;
        let hp = &self.heads[head];
        let i = self.config.in_dim;
        let att_w = p.var(hp.att_w);
        let w_self = g.slice_rows(att_w, 0, i);
        let w_nbr = g.slice_rows(att_w, i, i);
        let w_edge = g.slice_rows(att_w, 2 * i, 1);
        let s_self = g.gather_rows(g.matmul(h, w_self), topo.tgt_incl.clone());
        let s_nbr = g.gather_rows(g.matmul(h, w_nbr), topo.src_incl.clone());
        let s_edge = g.matmul(batch.weights_incl, w_edge);
        let pre = g.add(g.add(s_self, s_nbr), s_edge);
        let act = g.leaky_relu(pre, self.config.slope);
        let logits = g.matmul(act, p.var(hp.att_a));
        g.segment_softmax(logits, topo.tgt_incl.clone(), topo.n)
    }

    fn gat(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var) -> Var {
        let topo = batch.topology;
        let n = topo.n;
        let per_head: Vec<Var> = (0..self.config.effective_heads())
            .map(|k| {
                let alpha = self.attention(g, p, batch, h, k);
                let hw2 = g.matmul(h, p.var(self.heads[k].w2));
                let msg = g.mul_col(g.gather_rows(hw2, topo.src_incl.clone()), alpha);
                g.scatter_rows(msg, topo.tgt_incl.clone(), n)
            })
            .collect();
        let combined = if per_head.len() == 1 {
            per_head[0]
        } else {
            match self.config.combine {
                HeadCombine::Concatenate => g.concat_cols(&per_head),
                HeadCombine::Average => {
                    let mut acc = per_head[0];
                    for &v in &per_head[1..] {
                        acc = g.add(acc, v);
                    }
                    g.scale(acc, 1.0 / per_head.len() as f64)
                }
            }
        };
        let mut out = g.add(self.bias(g, p, n), combined);
        if let Some(w1) = self.w1 {
            out = g.add(out, g.matmul(h, p.var(w1)));
        }
        out
    }
}

/// Stack configuration for the network inside each GRU gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub kind: GnnKind,
    pub depth: usize,
    /// Per-head width of the hidden layers.
    pub hidden: usize,
    pub heads: usize,
    pub slope: f64,
}

/// A stack of graph layers with leaky ReLU between them. Hidden layers
/// concatenate heads; the final layer averages them.
#[derive(Clone, Debug)]
pub struct Gnn {
    pub layers: Vec<GnnLayer>,
    slope: f64,
}

impl Gnn {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        config: &GnnConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(config.depth >= 1, "gnn depth must be at least 1");
        let mut layers = Vec::with_capacity(config.depth);
        let mut width = in_dim;
        for l in 0..config.depth {
            let last = l + 1 == config.depth;
            let lc = GnnLayerConfig {
                kind: config.kind,
                in_dim: width,
                out_dim: if last { out_dim } else { config.hidden },
                heads: config.heads,
                combine: if last {
                    HeadCombine::Average
                } else {
                    HeadCombine::Concatenate
                },
                slope: config.slope,
            };
            let layer = GnnLayer::new(params, &format!("{prefix}.l{l}"), lc, rng);
            width = lc.output_width();
            layers.push(layer);
        }
        Self {
            layers,
            slope: config.slope,
        }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, h: Var) -> Var {
        let mut x = h;
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, batch, x);
            if l + 1 < self.layers.len() {
                x = g.leaky_relu(x, self.slope);
            }
        }
        x
    }
}
