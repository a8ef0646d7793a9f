//! Learned neural-ODE motion models, a single-step RK4 integrator with exact
//! state Jacobians, and constant-velocity / constant-acceleration baselines.

use crate::diffcore::{BoundParams, Graph, ParamId, ParameterSet, Tensor, Var};
use crate::gnn::glorot;
use crate::scenegraph::CATEGORY_COUNT;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionOrder {
    /// State `(x, y)`; the networks produce velocities.
    First,
    /// State `(x, y, vx, vy)`; the networks produce accelerations.
    Second,
}

impl MotionOrder {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(MotionOrder::First),
            2 => Some(MotionOrder::Second),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            MotionOrder::First => 1,
            MotionOrder::Second => 2,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            MotionOrder::First => 2,
            MotionOrder::Second => 4,
        }
    }

    /// First column of the two state components fed to the networks.
    fn net_input_offset(self) -> usize {
        match self {
            MotionOrder::First => 0,
            MotionOrder::Second => 2,
        }
    }
}

/// A fully connected network with ELU hidden activations and a scalar output.
#[derive(Clone, Debug)]
pub struct OdeNet {
    layers: Vec<(ParamId, ParamId)>,
}

struct NetTrace {
    out: Var,
    /// Pre-activations of every hidden layer.
    pre: Vec<Var>,
}

impl OdeNet {
    /// The output layer starts at zero so an untrained network contributes
    /// no derivative.
    pub fn new(params: &mut ParameterSet, prefix: &str, in_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let weight = if l == last {
                    Tensor::zeros(w[0], w[1])
                } else {
                    glorot(rng, w[0], w[1])
                };
                (
                    params.insert(format!("{prefix}.l{l}.w"), weight),
                    params.insert(format!("{prefix}.l{l}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    fn trace(&self, g: &Graph, p: &BoundParams, x: Var) -> NetTrace {
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.linear(h, p.var(w), p.var(b));
            if l + 1 < self.layers.len() {
                pre.push(z);
                h = g.elu(z);
            } else {
                h = z;
            }
        }
        NetTrace { out: h, pre }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Var {
        self.trace(g, p, x).out
    }

    /// Directional derivatives of the output along `dirs` tangent rows per
    /// input row. `dx` has `rows·dirs` rows holding the tangent of the first
    /// `dx.cols()` inputs; the remaining inputs are held fixed.
    fn tangent(&self, g: &Graph, p: &BoundParams, trace: &NetTrace, dx: Var, repeat: &Rc<[usize]>) -> Var {
        let k = g.shape(dx).1;
        let w0 = g.slice_rows(p.var(self.layers[0].0), 0, k);
        let mut t = g.matmul(dx, w0);
        for (l, &z) in trace.pre.iter().enumerate() {
            let slope = g.gather_rows(g.elu_deriv(z), repeat.clone());
            t = g.mul(t, slope);
            t = g.matmul(t, p.var(self.layers[l + 1].0));
        }
        t
    }
}

/// Affine map applied to the state components entering the networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: [f64; 2],
    pub scale: [f64; 2],
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            shift: [0.0; 2],
            scale: [1.0; 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub order: MotionOrder,
    pub hidden: [usize; 2],
    pub use_static: bool,
}

/// The two learned derivative networks plus the integrator.
#[derive(Clone, Debug)]
pub struct MotionModel {
    pub config: MotionConfig,
    pub f1: OdeNet,
    pub f2: OdeNet,
    pub scaling: InputScaling,
}

/// Result of one integrator step over `R` rows.
#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub next: Var,
    /// `R × d²` row-major Jacobians of `next` with respect to the state.
    pub jacobian: Option<Var>,
}

impl MotionModel {
    pub fn new(params: &mut ParameterSet, config: MotionConfig, rng: &mut impl Rng) -> Self {
        let in_dim = 3 + if config.use_static { CATEGORY_COUNT } else { 0 };
        let f1 = OdeNet::new(params, "motion.f1", in_dim, &config.hidden, rng);
        let f2 = OdeNet::new(params, "motion.f2", in_dim, &config.hidden, rng);
        Self {
            config,
            f1,
            f2,
            scaling: InputScaling::default(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.config.order.state_dim()
    }

    fn net_inputs(&self, g: &Graph, state: Var, u: Var, statics: Option<Var>) -> (Var, Var) {
        let (r, _) = g.shape(state);
        let off = self.config.order.net_input_offset();
        let s = g.slice_cols(state, off, 2);
        let shift = g.constant(Tensor::from_vec(r, 2, self.scaling.shift.repeat(r)));
        let scale = g.constant(Tensor::from_vec(r, 2, self.scaling.scale.repeat(r)));
        let s = g.mul(g.sub(s, shift), scale);
        let build = |k: usize| {
            let mut parts = vec![s, g.slice_cols(u, k, 1)];
            if self.config.use_static {
                parts.push(statics.expect("static one-hot required"));
            }
            g.concat_cols(&parts)
        };
        (build(0), build(1))
    }

    /// `R × d` derivative field at `state` with inputs `u` (`R × 2`).
    pub fn derivative(&self, g: &Graph, p: &BoundParams, state: Var, u: Var, statics: Option<Var>) -> Var {
        let (x1, x2) = self.net_inputs(g, state, u, statics);
        let d1 = self.f1.forward(g, p, x1);
        let d2 = self.f2.forward(g, p, x2);
        match self.config.order {
            MotionOrder::First => g.concat_cols(&[d1, d2]),
            MotionOrder::Second => g.concat_cols(&[g.slice_cols(state, 2, 2), d1, d2]),
        }
    }

    /// Derivative field and its directional derivatives along `tangent`
    /// (`R·d × d`, row `r·d + j` is the tangent of row `r` along direction `j`).
    fn derivative_with_tangent(
        &self,
        g: &Graph,
        p: &BoundParams,
        state: Var,
        u: Var,
        statics: Option<Var>,
        tangent: Var,
        repeat: &Rc<[usize]>,
    ) -> (Var, Var) {
        let (x1, x2) = self.net_inputs(g, state, u, statics);
        let t1 = self.f1.trace(g, p, x1);
        let t2 = self.f2.trace(g, p, x2);
        let off = self.config.order.net_input_offset();
        let rows = g.shape(tangent).0;
        let scale = g.constant(Tensor::from_vec(rows, 2, self.scaling.scale.repeat(rows)));
        let ds = g.mul(g.slice_cols(tangent, off, 2), scale);
        let dt1 = self.f1.tangent(g, p, &t1, ds, repeat);
        let dt2 = self.f2.tangent(g, p, &t2, ds, repeat);
        match self.config.order {
            MotionOrder::First => (g.concat_cols(&[t1.out, t2.out]), g.concat_cols(&[dt1, dt2])),
            MotionOrder::Second => (
                g.concat_cols(&[g.slice_cols(state, 2, 2), t1.out, t2.out]),
                g.concat_cols(&[g.slice_cols(tangent, 2, 2), dt1, dt2]),
            ),
        }
    }

    /// One explicit RK4 step of length `ts` with `u` held constant.
    pub fn step(
        &self,
        g: &Graph,
        p: &BoundParams,
        state: Var,
        u: Var,
        statics: Option<Var>,
        ts: f64,
        with_jacobian: bool,
    ) -> StepResult {
        let half = 0.5 * ts;
        let combine = |x: Var, k: [Var; 4]| {
            let s = g.add(g.add(k[0], g.scale(g.add(k[1], k[2]), 2.0)), k[3]);
            g.add(x, g.scale(s, ts / 6.0))
        };
        if !with_jacobian {
            let k1 = self.derivative(g, p, state, u, statics);
            let k2 = self.derivative(g, p, g.add(state, g.scale(k1, half)), u, statics);
            let k3 = self.derivative(g, p, g.add(state, g.scale(k2, half)), u, statics);
            let k4 = self.derivative(g, p, g.add(state, g.scale(k3, ts)), u, statics);
            return StepResult {
                next: combine(state, [k1, k2, k3, k4]),
                jacobian: None,
            };
        }
        let d = self.state_dim();
        let (r, _) = g.shape(state);
        let repeat: Rc<[usize]> = (0..r).flat_map(|i| std::iter::repeat(i).take(d)).collect();
        let mut eye = Tensor::zeros(r * d, d);
        for i in 0..r {
            for j in 0..d {
                eye.set(i * d + j, j, 1.0);
            }
        }
        let t0 = g.constant(eye);
        let (k1, j1) = self.derivative_with_tangent(g, p, state, u, statics, t0, &repeat);
        let (k2, j2) = self.derivative_with_tangent(
            g,
            p,
            g.add(state, g.scale(k1, half)),
            u,
            statics,
            g.add(t0, g.scale(j1, half)),
            &repeat,
        );
        let (k3, j3) = self.derivative_with_tangent(
            g,
            p,
            g.add(state, g.scale(k2, half)),
            u,
            statics,
            g.add(t0, g.scale(j2, half)),
            &repeat,
        );
        let (k4, j4) = self.derivative_with_tangent(
            g,
            p,
            g.add(state, g.scale(k3, ts)),
            u,
            statics,
            g.add(t0, g.scale(j3, ts)),
            &repeat,
        );
        let next = combine(state, [k1, k2, k3, k4]);
        let tangent = combine(t0, [j1, j2, j3, j4]);
        // row r·d + j holds column j of the Jacobian
        let jt = g.reshape(tangent, r, d * d);
        StepResult {
            next,
            jacobian: Some(g.btranspose(jt, d, d)),
        }
    }
}

/// Constant-velocity rollout: `pos + k·ts·vel` for `k = 1..=tf`.
pub fn cv_predict(pos: [f64; 2], vel: [f64; 2], ts: f64, tf: usize) -> Vec<[f64; 2]> {
    (1..=tf)
        .map(|k| {
            let t = k as f64 * ts;
            [pos[0] + t * vel[0], pos[1] + t * vel[1]]
        })
        .collect()
}

/// Constant-acceleration rollout: `pos + t·vel + ½t²·acc` with `t = k·ts`.
pub fn ca_predict(pos: [f64; 2], vel: [f64; 2], acc: [f64; 2], ts: f64, tf: usize) -> Vec<[f64; 2]> {
    (1..=tf)
        .map(|k| {
            let t = k as f64 * ts;
            [
                pos[0] + t * vel[0] + 0.5 * t * t * acc[0],
                pos[1] + t * vel[1] + 0.5 * t * t * acc[1],
            ]
        })
        .collect()
}
