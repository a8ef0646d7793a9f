//! Every graph primitive checked against central differences.

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
/// Inputs are kept this far away from kinks of piecewise primitives.
const KINK_MARGIN: f64 = 1e-3;

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, kinks: &[f64]) -> Tensor {
    let data = (0..r * c)
        .map(|_| loop {
            let x: f64 = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (x - k).abs() > KINK_MARGIN) {
                break x;
            }
        })
        .collect();
    Tensor::from_vec(r, c, data)
}

/// Builds a scalar `Σ w ⊙ op(inputs)` with fixed random weights and checks
/// every input gradient.
fn check<F>(label: &str, inputs: Vec<Tensor>, seed: u64, op: F)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let mut params = ParameterSet::new();
    for (i, t) in inputs.into_iter().enumerate() {
        params.insert(format!("in{i}"), t);
    }
    let n = params.len();
    let weights = {
        let g = Graph::new();
        let b = params.bind_constant(&g);
        let vars: Vec<Var> = (0..n).map(|i| b.var(ParamId(i))).collect();
        let out = op(&g, &vars);
        let (r, c) = g.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        random_tensor(&mut rng, r, c, &[])
    };
    let loss = |g: &Graph, b: &BoundParams| -> crate::error::Result<Var> {
        let vars: Vec<Var> = (0..n).map(|i| b.var(ParamId(i))).collect();
        let out = op(g, &vars);
        let w = g.constant(weights.clone());
        Ok(g.sum(g.mul(out, w)))
    };
    let (_, analytic) = evaluate_with_gradients(loss, &params).unwrap();
    let numeric = finite_difference_oracle(loss, &params, STEP).unwrap();
    let cmp = compare_gradients(&analytic, &numeric, FLOOR);
    assert!(
        cmp.passes(TOL),
        "{label}: rel error {} at {}[{}] (analytic {}, numeric {})",
        cmp.max_rel_error,
        cmp.worst_param,
        cmp.worst_index,
        cmp.analytic,
        cmp.numeric
    );
}

#[test]
fn unary_primitives_match_finite_differences() {
    let cases: Vec<(Unary, Vec<f64>)> = vec![
        (Unary::Sigmoid, vec![]),
        (Unary::Tanh, vec![]),
        (Unary::LeakyRelu(0.01), vec![0.0]),
        (Unary::Softplus, vec![]),
        (Unary::Softsign, vec![0.0]),
        (Unary::Elu, vec![0.0]),
        (Unary::EluDeriv, vec![0.0]),
        (Unary::Exp, vec![]),
        (Unary::Square, vec![]),
        (Unary::Huber(1.0), vec![-1.0, 1.0]),
    ];
    for (seed, (u, kinks)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let x = random_tensor(&mut rng, 3, 4, &kinks);
        check(u.name(), vec![x], seed as u64, move |g, v| g.unary(v[0], u));
    }
    // log and sqrt need positive inputs
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random_tensor(&mut rng, 2, 3, &[]).map(|v| v.abs() + 0.1);
    check("log", vec![x.clone()], 99, |g, v| g.ln(v[0]));
    check("sqrt", vec![x], 100, |g, v| g.sqrt(v[0]));
}

#[test]
fn binary_and_linear_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, 3, 4, &[]);
    let b = random_tensor(&mut rng, 3, 4, &[]);
    let w = random_tensor(&mut rng, 4, 2, &[]);
    let pos = random_tensor(&mut rng, 3, 4, &[]).map(|v| v.abs() + 0.5);
    check("add", vec![a.clone(), b.clone()], 1, |g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], 2, |g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], 3, |g, v| g.mul(v[0], v[1]));
    check("div", vec![a.clone(), pos], 4, |g, v| g.div(v[0], v[1]));
    check("matmul", vec![a.clone(), w], 5, |g, v| g.matmul(v[0], v[1]));
    check("transpose", vec![a.clone()], 6, |g, v| g.transpose(v[0]));
    check("scale", vec![a.clone()], 8, |g, v| g.scale(v[0], -1.7));
    check("offset", vec![a.clone()], 9, |g, v| g.offset(v[0], 3.0));
    check("sum", vec![a.clone()], 10, |g, v| g.sum(v[0]));
    check("row_sum", vec![a.clone()], 11, |g, v| g.row_sum(v[0]));
    check("reshape", vec![a], 12, |g, v| g.reshape(v[0], 2, 6));
}

#[test]
fn broadcast_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_tensor(&mut rng, 1, 1, &[]);
    let col = random_tensor(&mut rng, 3, 1, &[]);
    let row = random_tensor(&mut rng, 1, 4, &[]);
    check("broadcast scalar", vec![s], 1, |g, v| g.broadcast(v[0], 3, 4));
    check("broadcast col", vec![col], 2, |g, v| g.broadcast(v[0], 3, 4));
    check("broadcast row", vec![row], 3, |g, v| g.broadcast(v[0], 3, 4));
}

#[test]
fn structural_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_tensor(&mut rng, 4, 3, &[]);
    let b = random_tensor(&mut rng, 4, 2, &[]);
    let c = random_tensor(&mut rng, 2, 3, &[]);
    check("concat_cols", vec![a.clone(), b], 1, |g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", vec![a.clone(), c], 2, |g, v| g.concat_rows(&[v[0], v[1]]));
    check("slice_cols", vec![a.clone()], 3, |g, v| g.slice_cols(v[0], 1, 2));
    check("slice_rows", vec![a.clone()], 4, |g, v| g.slice_rows(v[0], 1, 2));
    let idx: Rc<[usize]> = Rc::from(vec![3usize, 0, 0, 2, 1]);
    let i2 = idx.clone();
    check("gather_rows", vec![a.clone()], 5, move |g, v| g.gather_rows(v[0], i2.clone()));
    let tgt: Rc<[usize]> = Rc::from(vec![1usize, 1, 0, 2]);
    check("scatter_rows", vec![a.clone()], 6, move |g, v| g.scatter_rows(v[0], tgt.clone(), 3));
}

#[test]
fn normalizing_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = random_tensor(&mut rng, 3, 5, &[]);
    check("row_softmax", vec![a.clone()], 1, |g, v| g.row_softmax(v[0], None));
    let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    check("row_softmax masked", vec![a.clone()], 2, move |g, v| {
        g.row_softmax(v[0], Some(&mask))
    });
    check("row_logsumexp", vec![a], 3, |g, v| g.row_logsumexp(v[0]));
    let e = random_tensor(&mut rng, 6, 2, &[]);
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 1, 0, 2, 1, 0]);
    check("segment_softmax", vec![e], 4, move |g, v| g.segment_softmax(v[0], seg.clone(), 3));
}

#[test]
fn batched_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = random_tensor(&mut rng, 3, 6, &[]);
    let b = random_tensor(&mut rng, 3, 12, &[]);
    check("bmm", vec![a.clone(), b], 1, |g, v| g.bmm(v[0], v[1], 2, 3, 4));
    check("btranspose", vec![a], 2, |g, v| g.btranspose(v[0], 2, 3));
}

#[test]
fn segment_softmax_sums_to_one_per_segment() {
    let g = Graph::new();
    let x = g.constant(Tensor::col_vector(&[0.3, -1.0, 2.0, 0.0, 5.0]));
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 0, 1, 1, 1]);
    let y = g.segment_softmax(x, seg, 2);
    let v = g.value(y);
    assert!((v.data()[0] + v.data()[1] - 1.0).abs() < 1e-12);
    assert!((v.data()[2] + v.data()[3] + v.data()[4] - 1.0).abs() < 1e-12);
}

#[test]
fn evaluation_is_bit_deterministic() {
    let run = || {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![0.1, -0.4], vec![1.3, 0.2]]));
        let w = g.param(Tensor::from_rows(&[vec![0.5, 2.0], vec![-1.0, 0.25]]));
        let y = g.tanh(g.matmul(x, w));
        let l = g.sum(g.row_logsumexp(y));
        let gr = g.backward(l);
        (g.item(l).to_bits(), gr.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
