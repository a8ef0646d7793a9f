//! Graph-GRU encoder over the observed history and graph-GRU decoder with
//! temporal attention over the encoder memory.

use crate::diffcore::{BoundParams, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::gnn::{glorot, Gnn, GnnConfig, GraphBatch};
use rand::Rng;

/// Number of raw values the decoder emits per component and step:
/// two motion inputs and three process-noise parameters.
pub const RAW_PER_COMPONENT: usize = 5;

/// GRU update from precomputed input-side and hidden-side intermediates
/// (`n × 3d` each, laid out as reset, update, candidate).
pub fn gru_cell(g: &Graph, f_int: Var, h_int: Var, bias: Var, h_prev: Var, d: usize) -> Var {
    let (n, _) = g.shape(h_prev);
    let b = g.broadcast(bias, n, 3 * d);
    let fb = g.add(f_int, b);
    let r = g.sigmoid(g.add(g.slice_cols(fb, 0, d), g.slice_cols(h_int, 0, d)));
    let z = g.sigmoid(g.add(g.slice_cols(fb, d, d), g.slice_cols(h_int, d, d)));
    let cand = g.tanh(g.add(g.slice_cols(fb, 2 * d, d), g.mul(r, g.slice_cols(h_int, 2 * d, d))));
    // (1 − z) ⊙ h̃ + z ⊙ h_prev = h̃ + z ⊙ (h_prev − h̃)
    g.add(cand, g.mul(z, g.sub(h_prev, cand)))
}

/// A GRU cell whose input and hidden maps are graph networks.
#[derive(Clone, Debug)]
pub struct GraphGru {
    pub hidden: usize,
    f: Gnn,
    h: Gnn,
    bias: ParamId,
}

impl GraphGru {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        gnn: &GnnConfig,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let f = Gnn::new(params, &format!("{prefix}.gnn_f"), gnn, in_dim, 3 * hidden, rng);
        let h = Gnn::new(params, &format!("{prefix}.gnn_h"), gnn, hidden, 3 * hidden, rng);
        let bias = params.insert(format!("{prefix}.b"), Tensor::zeros(1, 3 * hidden));
        Self { hidden, f, h, bias }
    }

    pub fn step(&self, g: &Graph, p: &BoundParams, batch: GraphBatch<'_>, x: Var, h_prev: Var) -> Var {
        let fi = self.f.forward(g, p, batch, x);
        let hi = self.h.forward(g, p, batch, h_prev);
        gru_cell(g, fi, hi, p.var(self.bias), h_prev, self.hidden)
    }
}

/// Inputs of one encoder step.
#[derive(Clone, Copy)]
pub struct EncoderStep<'a> {
    /// Node inputs, `n × in`; rows of absent agents are ignored.
    pub input: Var,
    pub batch: GraphBatch<'a>,
    /// `n × 1` indicator of agents observed at this step.
    pub present: Var,
}

/// Per-agent stack of hidden states over the history.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    /// One `n × d` entry per history step.
    pub slots: Vec<Var>,
    /// The slots side by side, `n × (L·d)`.
    pub stacked: Var,
    /// Row-major `n × L` validity of each slot.
    pub mask: Vec<bool>,
    /// Hidden state at the prediction instant.
    pub last: Var,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cell: GraphGru,
    pub h_init: ParamId,
}

impl Encoder {
    pub fn new(params: &mut ParameterSet, gnn: &GnnConfig, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let cell = GraphGru::new(params, "encoder", gnn, in_dim, hidden, rng);
        let h_init = params.insert("encoder.h_init", Tensor::zeros(1, hidden));
        Self { cell, h_init }
    }

    /// Runs the cell over all steps. Absent agents keep their previous
    /// state, which is `h_init` until their first observation.
    pub fn encode(&self, g: &Graph, p: &BoundParams, steps: &[EncoderStep<'_>], mask: Vec<bool>) -> EncoderMemory {
        assert!(!steps.is_empty(), "encoder needs at least one step");
        let d = self.cell.hidden;
        let n = steps[0].batch.topology.n;
        assert_eq!(mask.len(), n * steps.len(), "memory mask shape");
        let mut h = g.broadcast(p.var(self.h_init), n, d);
        let mut slots = Vec::with_capacity(steps.len());
        for s in steps {
            let new = self.cell.step(g, p, s.batch, s.input, h);
            h = g.add(h, g.mul_col(g.sub(new, h), s.present));
            slots.push(h);
        }
        EncoderMemory {
            stacked: g.concat_cols(&slots),
            slots,
            mask,
            last: h,
        }
    }
}

/// Result of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderStep {
    pub hidden: Var,
    /// Attention over memory slots, `n × L`.
    pub attention: Var,
    /// Raw head output, `n × (M·5)`: per component `[u₁, u₂, ρ, σ₁, σ₂]`.
    pub raw: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderShape {
    pub hidden: usize,
    pub components: usize,
    pub state_dim: usize,
    pub memory_len: usize,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub shape: DecoderShape,
    w_x: ParamId,
    b_x: ParamId,
    w_alpha: ParamId,
    b_alpha: ParamId,
    w_fhat: ParamId,
    b_fhat: ParamId,
    cell: GraphGru,
    w_out: ParamId,
    b_out: ParamId,
    w_pi: ParamId,
    b_pi: ParamId,
}

impl Decoder {
    pub fn new(params: &mut ParameterSet, gnn: &GnnConfig, shape: DecoderShape, rng: &mut impl Rng) -> Self {
        let DecoderShape {
            hidden: d,
            components: m,
            state_dim: ds,
            memory_len: l,
            ..
        } = shape;
        let w_x = params.insert("decoder.w_x", glorot(rng, m * ds, d));
        let b_x = params.insert("decoder.b_x", Tensor::zeros(1, d));
        let w_alpha = params.insert("decoder.w_alpha", glorot(rng, 2 * d, l));
        let b_alpha = params.insert("decoder.b_alpha", Tensor::zeros(1, l));
        let w_fhat = params.insert("decoder.w_fhat", glorot(rng, 2 * d, d));
        let b_fhat = params.insert("decoder.b_fhat", Tensor::zeros(1, d));
        let cell = GraphGru::new(params, "decoder", gnn, d, d, rng);
        let w_out = params.insert("decoder.w_out", glorot(rng, d, m * RAW_PER_COMPONENT));
        let b_out = params.insert("decoder.b_out", Tensor::zeros(1, m * RAW_PER_COMPONENT));
        let w_pi = params.insert("decoder.w_pi", glorot(rng, d, m));
        let b_pi = params.insert("decoder.b_pi", Tensor::zeros(1, m));
        Self {
            shape,
            w_x,
            b_x,
            w_alpha,
            b_alpha,
            w_fhat,
            b_fhat,
            cell,
            w_out,
            b_out,
            w_pi,
            b_pi,
        }
    }

    /// State embedding `W_x·s + b_x` of the `n × (M·d_s)` fed-back states.
    pub fn embed(&self, g: &Graph, p: &BoundParams, prev_states: Var) -> Var {
        g.linear(prev_states, p.var(self.w_x), p.var(self.b_x))
    }

    /// Temporal attention weights and the attended summary.
    pub fn attend(&self, g: &Graph, p: &BoundParams, h_prev: Var, emb: Var, memory: &EncoderMemory) -> (Var, Var) {
        let l = memory.len();
        let d = self.shape.hidden;
        let q = g.linear(g.concat_cols(&[h_prev, emb]), p.var(self.w_alpha), p.var(self.b_alpha));
        let alpha = g.row_softmax(q, Some(&memory.mask));
        let a = g.bmm(alpha, memory.stacked, 1, l, d);
        (alpha, a)
    }

    pub fn step(
        &self,
        g: &Graph,
        p: &BoundParams,
        batch: GraphBatch<'_>,
        memory: &EncoderMemory,
        h_prev: Var,
        prev_states: Var,
    ) -> DecoderStep {
        let emb = self.embed(g, p, prev_states);
        let (attention, a) = self.attend(g, p, h_prev, emb, memory);
        let fhat = g.linear(g.concat_cols(&[a, emb]), p.var(self.w_fhat), p.var(self.b_fhat));
        let fhat = g.leaky_relu(fhat, self.shape.slope);
        let hidden = self.cell.step(g, p, batch, fhat, h_prev);
        let raw = g.linear(hidden, p.var(self.w_out), p.var(self.b_out));
        DecoderStep { hidden, attention, raw }
    }

    /// Mixture logits from the final encoder representation, `n × M`.
    pub fn mixture_logits(&self, g: &Graph, p: &BoundParams, h_enc: Var) -> Var {
        g.linear(h_enc, p.var(self.w_pi), p.var(self.b_pi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::activations::sigmoid;
    use crate::gnn::{GnnKind, GraphTopology};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gnn(kind: GnnKind) -> GnnConfig {
        GnnConfig {
            kind,
            depth: 2,
            hidden: 4,
            heads: 1,
            slope: 0.01,
        }
    }

    fn zero_all(ps: &mut ParameterSet) {
        let ids: Vec<ParamId> = ps.ids().collect();
        for id in ids {
            let t = ps.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn gru_cell_limits() {
        let g = Graph::new();
        let d = 2;
        let zero = g.constant(Tensor::zeros(1, 3 * d));
        let h0 = g.constant(Tensor::zeros(1, d));
        let h = gru_cell(&g, zero, zero, zero, h0, d);
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);

        let hp = g.constant(Tensor::row_vector(&[0.3, -0.8]));
        let closed = g.constant(Tensor::row_vector(&[0.0, 0.0, 1e3, 1e3, 0.0, 0.0]));
        let f = g.constant(Tensor::row_vector(&[0.1, 0.2, 0.0, 0.0, 0.5, -0.4]));
        let h = gru_cell(&g, f, zero, closed, hp, d);
        assert_eq!(g.value(h).data(), &[0.3, -0.8]);

        let open = g.constant(Tensor::row_vector(&[0.7, -0.2, -1e3, -1e3, 0.0, 0.0]));
        let h = gru_cell(&g, f, zero, open, hp, d);
        let v = g.value(h);
        assert!((v.data()[0] - 0.5f64.tanh()).abs() < 1e-12);
        assert!((v.data()[1] - (-0.4f64).tanh()).abs() < 1e-12);
    }

    #[test]
    fn gru_cell_matches_scalar_reference() {
        let g = Graph::new();
        let fi = [0.2, -0.1, 0.4];
        let hi = [-0.3, 0.5, 0.8];
        let b = [0.05, -0.02, 0.1];
        let hp = 0.6;
        let h = gru_cell(
            &g,
            g.constant(Tensor::row_vector(&fi)),
            g.constant(Tensor::row_vector(&hi)),
            g.constant(Tensor::row_vector(&b)),
            g.constant(Tensor::row_vector(&[hp])),
            1,
        );
        let r = sigmoid(fi[0] + b[0] + hi[0]);
        let z = sigmoid(fi[1] + b[1] + hi[1]);
        let c = (fi[2] + b[2] + r * hi[2]).tanh();
        let expect = (1.0 - z) * c + z * hp;
        assert!((g.item(h) - expect).abs() < 1e-14);
    }

    fn encoder_setup(kind: GnnKind, zero: bool) -> (ParameterSet, Encoder) {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(&mut ps, &gnn(kind), 3, 4, &mut rng);
        if zero {
            zero_all(&mut ps);
        }
        (ps, enc)
    }

    fn run_encoder(
        ps: &ParameterSet,
        enc: &Encoder,
        topo: &[GraphTopology],
        weights: &[Vec<f64>],
        inputs: &[Tensor],
        present: &[Vec<f64>],
    ) -> (Vec<Tensor>, Tensor) {
        let g = Graph::new();
        let p = ps.bind_constant(&g);
        let n = inputs[0].rows();
        let steps: Vec<EncoderStep> = (0..inputs.len())
            .map(|i| EncoderStep {
                input: g.constant(inputs[i].clone()),
                batch: GraphBatch::with_weights(&g, &topo[i], &weights[i]),
                present: g.constant(Tensor::col_vector(&present[i])),
            })
            .collect();
        let mut mask = vec![false; n * inputs.len()];
        for a in 0..n {
            for (i, pr) in present.iter().enumerate() {
                mask[a * inputs.len() + i] = pr[a] > 0.5;
            }
        }
        let mem = enc.encode(&g, &p, &steps, mask);
        let slots = mem.slots.iter().map(|&s| g.value(s).clone()).collect();
        let last = g.value(mem.last).clone();
        (slots, last)
    }

    #[test]
    fn zero_parameters_encode_to_zero() {
        let (ps, enc) = encoder_setup(GnnKind::Gat, true);
        let topo = vec![GraphTopology::isolated(1); 3];
        let inputs = vec![Tensor::row_vector(&[1.0, -2.0, 0.5]); 3];
        let (slots, last) = run_encoder(&ps, &enc, &topo, &[vec![], vec![], vec![]], &inputs, &vec![vec![1.0]; 3]);
        assert!(last.data().iter().all(|&v| v == 0.0));
        assert!(slots.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn late_agent_holds_initial_state_then_updates_once() {
        let (mut ps, enc) = encoder_setup(GnnKind::GraphConv, false);
        let init = Tensor::row_vector(&[0.1, 0.2, 0.3, 0.4]);
        *ps.get_mut(enc.h_init) = init.clone();
        let topo = vec![GraphTopology::isolated(2); 3];
        let inputs = vec![Tensor::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.2, 0.1, -0.3]]); 3];
        let present = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let (slots, last) = run_encoder(&ps, &enc, &topo, &[vec![], vec![], vec![]], &inputs, &present);
        assert_eq!(slots[0].row(1), init.row(0));
        assert_eq!(slots[1].row(1), init.row(0));
        assert_ne!(last.row(1), init.row(0));
        // one cell application on h_init
        let one = run_encoder(
            &ps,
            &enc,
            &[GraphTopology::isolated(1)],
            &[vec![]],
            &[Tensor::row_vector(&[0.2, 0.1, -0.3])],
            &[vec![1.0]],
        )
        .1;
        assert_eq!(last.row(1), one.row(0));
    }

    #[test]
    fn edge_free_encoder_is_per_agent() {
        for kind in [GnnKind::GraphConv, GnnKind::Gcn, GnnKind::Gat, GnnKind::GatPlus] {
            let (ps, enc) = encoder_setup(kind, false);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let inputs: Vec<Tensor> = (0..4)
                .map(|_| Tensor::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let topo = vec![GraphTopology::isolated(3); 4];
            let (_, joint) = run_encoder(&ps, &enc, &topo, &vec![vec![]; 4], &inputs, &vec![vec![1.0; 3]; 4]);
            for a in 0..3 {
                let own: Vec<Tensor> = inputs.iter().map(|t| Tensor::row_vector(t.row(a))).collect();
                let (_, single) = run_encoder(
                    &ps,
                    &enc,
                    &vec![GraphTopology::isolated(1); 4],
                    &vec![vec![]; 4],
                    &own,
                    &vec![vec![1.0]; 4],
                );
                assert_eq!(joint.row(a), single.row(0), "{kind:?}");
            }
        }
    }

    fn decoder_setup(m: usize, zero: bool) -> (ParameterSet, Decoder) {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dec = Decoder::new(
            &mut ps,
            &gnn(GnnKind::GatPlus),
            DecoderShape {
                hidden: 4,
                components: m,
                state_dim: 4,
                memory_len: 3,
                slope: 0.01,
            },
            &mut rng,
        );
        if zero {
            zero_all(&mut ps);
        }
        (ps, dec)
    }

    fn memory(g: &Graph, n: usize, mask: Vec<bool>, seed: u64) -> EncoderMemory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::from_vec(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        EncoderMemory {
            stacked: g.concat_cols(&slots),
            last: slots[2],
            slots,
            mask,
        }
    }

    #[test]
    fn zero_parameters_decode_to_zero() {
        let (ps, dec) = decoder_setup(8, true);
        let g = Graph::new();
        let p = ps.bind_constant(&g);
        let topo = GraphTopology::new(3, &[(0, 1), (1, 2), (0, 2)]);
        let batch = GraphBatch::with_weights(&g, &topo, &[0.5, 0.2, 0.9]);
        let mem = memory(&g, 3, vec![true; 9], 1);
        let states = g.constant(Tensor::filled(3, 32, 1.5));
        let h = g.constant(Tensor::zeros(3, 4));
        let s = dec.step(&g, &p, batch, &mem, h, states);
        assert_eq!(g.shape(s.raw), (3, 8 * RAW_PER_COMPONENT));
        assert!(g.value(s.raw).data().iter().all(|&v| v == 0.0));
        let a = g.value(s.attention);
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_attention_is_memory_mean() {
        let (ps, dec) = decoder_setup(2, true);
        let g = Graph::new();
        let p = ps.bind_constant(&g);
        let mem = memory(&g, 2, vec![true; 6], 2);
        let h = g.constant(Tensor::zeros(2, 4));
        let emb = g.constant(Tensor::zeros(2, 4));
        let (_, a) = dec.attend(&g, &p, h, emb, &mem);
        let a = g.value(a);
        for r in 0..2 {
            for c in 0..4 {
                let mean: f64 = mem.slots.iter().map(|&s| g.value(s).get(r, c)).sum::<f64>() / 3.0;
                assert!((a.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_attention_selects_slot() {
        let (mut ps, dec) = decoder_setup(2, true);
        *ps.get_mut(dec.b_alpha) = Tensor::row_vector(&[-1e3, 1e3, -1e3]);
        let g = Graph::new();
        let p = ps.bind_constant(&g);
        let mem = memory(&g, 2, vec![true; 6], 3);
        let h = g.constant(Tensor::zeros(2, 4));
        let emb = g.constant(Tensor::zeros(2, 4));
        let (_, a) = dec.attend(&g, &p, h, emb, &mem);
        assert_eq!(*g.value(a), *g.value(mem.slots[1]));
    }

    #[test]
    fn masked_slots_receive_no_attention() {
        let (ps, dec) = decoder_setup(2, false);
        let g = Graph::new();
        let p = ps.bind_constant(&g);
        let mem = memory(&g, 2, vec![false, true, true, false, false, true], 4);
        let h = g.constant(Tensor::filled(2, 4, 0.3));
        let emb = g.constant(Tensor::filled(2, 4, -0.2));
        let (alpha, _) = dec.attend(&g, &p, h, emb, &mem);
        let al = g.value(alpha);
        assert_eq!(al.get(0, 0), 0.0);
        assert_eq!(al.get(1, 0), 0.0);
        assert_eq!(al.get(1, 1), 0.0);
        assert!((al.get(1, 2) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attention_is_a_distribution(seed in 0u64..500) {
            let (ps, dec) = decoder_setup(3, false);
            let g = Graph::new();
            let p = ps.bind_constant(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 2 || rng.gen_bool(0.6)).collect();
            let mem = memory(&g, 4, mask.clone(), seed);
            let h = g.constant(Tensor::from_vec(4, 4, (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect()));
            let emb = g.constant(Tensor::from_vec(4, 4, (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect()));
            let (alpha, _) = dec.attend(&g, &p, h, emb, &mem);
            let al = g.value(alpha);
            prop_assert!(al.cols() == 3);
            for r in 0..4 {
                let s: f64 = al.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                for c in 0..3 {
                    prop_assert!(al.get(r, c) >= 0.0);
                    if !mask[r * 3 + c] {
                        prop_assert!(al.get(r, c) == 0.0);
                    }
                }
            }
        }
    }
}
