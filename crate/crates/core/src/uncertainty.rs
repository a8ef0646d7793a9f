//! Extended-Kalman-filter time update along each predicted trajectory, with
//! learned process noise injected into the two highest-order states.

use crate::diffcore::activations::{softplus, softsign};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

/// Added to the diagonal of every position covariance before it enters a
/// likelihood.
pub const LIKELIHOOD_FLOOR: f64 = 1e-4;
/// Eigenvalues of a propagated covariance above this are accepted as PSD.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// A 2 × 2 process-noise covariance and its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoise {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub q: [[f64; 2]; 2],
}

/// `ρ = softsign(ρ_raw)`, `σᵢ = softplus(sᵢ_raw)`.
pub fn build_q(rho_raw: f64, s1_raw: f64, s2_raw: f64) -> ProcessNoise {
    let rho = softsign(rho_raw);
    let sigma1 = softplus(s1_raw);
    let sigma2 = softplus(s2_raw);
    let c = rho * sigma1 * sigma2;
    ProcessNoise {
        sigma1,
        sigma2,
        rho,
        q: [[sigma1 * sigma1, c], [c, sigma2 * sigma2]],
    }
}

/// `T_s` times the selector of the two highest-order states, `d × 2`.
pub fn build_g(d: usize, ts: f64) -> Result<Tensor> {
    if d != 2 && d != 4 {
        return Err(Error::Config(format!("unsupported state dimension {d}")));
    }
    let mut g = Tensor::zeros(d, 2);
    g.set(d - 2, 0, ts);
    g.set(d - 1, 1, ts);
    Ok(g)
}

/// In-graph process noise from raw head outputs `R × 3` (`ρ, σ₁, σ₂`),
/// returned as row-major `R × 4`.
pub fn process_noise(g: &Graph, raw: Var) -> Var {
    let rho = g.softsign(g.slice_cols(raw, 0, 1));
    let s1 = g.softplus(g.slice_cols(raw, 1, 1));
    let s2 = g.softplus(g.slice_cols(raw, 2, 1));
    let c = g.mul(rho, g.mul(s1, s2));
    g.concat_cols(&[g.square(s1), c, c, g.square(s2)])
}

/// Constant `4 × d²` map placing a row-major 2 × 2 block scaled by `ts²`
/// into the lower-right corner of a `d × d` matrix, i.e. `vec(Q) ↦ vec(G Q Gᵀ)`.
fn noise_embedding(d: usize, ts: f64) -> Tensor {
    let mut e = Tensor::zeros(4, d * d);
    let s = ts * ts;
    for i in 0..2 {
        for j in 0..2 {
            e.set(2 * i + j, (d - 2 + i) * d + (d - 2 + j), s);
        }
    }
    e
}

/// Running diagnostics over covariance updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceStats {
    /// Smallest eigenvalue seen before clamping.
    pub min_eigenvalue: f64,
    /// Largest `|P − Pᵀ|` entry after symmetrisation.
    pub max_asymmetry: f64,
    pub clamped: usize,
    pub updates: usize,
}

impl Default for CovarianceStats {
    fn default() -> Self {
        Self {
            min_eigenvalue: f64::INFINITY,
            max_asymmetry: 0.0,
            clamped: 0,
            updates: 0,
        }
    }
}

impl CovarianceStats {
    pub fn merge(&mut self, other: &CovarianceStats) {
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
        self.max_asymmetry = self.max_asymmetry.max(other.max_asymmetry);
        self.clamped += other.clamped;
        self.updates += other.updates;
    }
}

fn symmetric_eigen(flat: &[f64], d: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(DMatrix::from_row_slice(d, d, flat))
}

/// `P⁺ = F P Fᵀ + G Q Gᵀ` for every row, then symmetrised. Negative
/// eigenvalues are clamped to zero through a constant correction.
pub fn ekf_time_update(
    g: &Graph,
    p: Var,
    f: Var,
    q: Var,
    ts: f64,
    d: usize,
    stats: &mut CovarianceStats,
) -> Result<Var> {
    let fp = g.bmm(f, p, d, d, d);
    let fpf = g.bmm(fp, g.btranspose(f, d, d), d, d, d);
    let gqg = g.matmul(q, g.constant(noise_embedding(d, ts)));
    let sum = g.add(fpf, gqg);
    let sym = g.scale(g.add(sum, g.btranspose(sum, d, d)), 0.5);
    let value = g.value(sym).clone();
    if !value.all_finite() {
        return Err(Error::Numeric("non-finite covariance in time update".into()));
    }
    let mut correction: Option<Tensor> = None;
    for r in 0..value.rows() {
        let row = value.row(r);
        for i in 0..d {
            for j in 0..i {
                stats.max_asymmetry = stats.max_asymmetry.max((row[i * d + j] - row[j * d + i]).abs());
            }
        }
        let eig = symmetric_eigen(row, d);
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        stats.min_eigenvalue = stats.min_eigenvalue.min(lmin);
        stats.updates += 1;
        if lmin < 0.0 {
            let clamped = eig.eigenvalues.map(|l| l.max(0.0));
            let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            let c = correction.get_or_insert_with(|| Tensor::zeros(value.rows(), d * d));
            for i in 0..d {
                for j in 0..d {
                    let v = 0.5 * (fixed[(i, j)] + fixed[(j, i)]);
                    c.set(r, i * d + j, v - row[i * d + j]);
                }
            }
            stats.clamped += 1;
        }
    }
    Ok(match correction {
        Some(c) => g.add(sym, g.constant(c)),
        None => sym,
    })
}

/// Position block (first two states) of row-major `R × d²` covariances,
/// returned as `R × 4`.
pub fn position_block(g: &Graph, p: Var, d: usize) -> Var {
    if d == 2 {
        p
    } else {
        g.concat_cols(&[g.slice_cols(p, 0, 2), g.slice_cols(p, d, 2)])
    }
}

/// Dense reference for a single covariance update.
pub fn time_update_dense(p: &Tensor, f: &Tensor, q: &[[f64; 2]; 2], ts: f64) -> Result<Tensor> {
    let d = p.rows();
    let gm = build_g(d, ts)?;
    let qt = Tensor::from_rows(&[q[0].to_vec(), q[1].to_vec()]);
    let fpf = f.matmul(p).matmul_t(f);
    let gqg = gm.matmul(&qt).matmul_t(&gm);
    let s = fpf.zip_map(&gqg, |a, b| a + b);
    let st = s.transpose();
    Ok(s.zip_map(&st, |a, b| 0.5 * (a + b)))
}

/// Smallest eigenvalue of a symmetric dense matrix.
pub fn min_eigenvalue(p: &Tensor) -> f64 {
    symmetric_eigen(p.data(), p.rows())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
