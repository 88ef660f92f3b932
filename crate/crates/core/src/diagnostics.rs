//! Linearisation accuracy diagnostics for a fitted model.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{eta_nonlinear, sample_latent, FitResult, ObsModel};
use crate::model::Model;
use crate::sparse::{chol, CholFactor, SparseMatrix, SparseSym};

const HESSIAN_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlReport {
    /// `KL(p̄ ‖ p̃)`
    pub kl_lin_to_nonlin: f64,
    /// `KL(p̃ ‖ p̄)`
    pub kl_nonlin_to_lin: f64,
    pub g_matrix_norm: f64,
}

/// Monte-Carlo estimate of `Σ_i E|η̄_i(u) − η̃_i(u)|² / Var(η̄_i(u))` under
/// the fitted posterior (θ grid mixture).
pub fn linearisation_deviation(fit: &FitResult, n_samples: usize, seed: u64) -> Result<f64> {
    if fit.model.is_linear() {
        return Ok(0.0);
    }
    if n_samples < 2 {
        return Err(Error::Diagnostic("at least two samples are needed".into()));
    }
    let lin = &fit.linearisation;
    let rows = lin.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq = vec![0.0; rows];
    let mut s1 = vec![0.0; rows];
    let mut s2 = vec![0.0; rows];
    for u in sample_latent(fit, n_samples, &mut rng)? {
        let bar = lin.eta_bar(&u);
        let nl = eta_nonlinear(&fit.model, &u)?;
        for i in 0..rows {
            sq[i] += (bar[i] - nl[i]).powi(2);
            s1[i] += bar[i];
            s2[i] += bar[i] * bar[i];
        }
    }
    let n = n_samples as f64;
    let mut out = 0.0;
    for i in 0..rows {
        let mean = s1[i] / n;
        let var = (s2[i] - n * mean * mean) / (n - 1.0);
        let msd = sq[i] / n;
        if !(var > 0.0) {
            if msd == 0.0 {
                continue;
            }
            return Err(Error::Diagnostic(format!("predictor row {i} has zero posterior variance")));
        }
        out += msd / var;
    }
    Ok(out)
}

/// `G = Σ_i w_i H_i` where `H_i` is the Hessian of `η̃_i` at `u`, by central
/// second differences over the index pairs that share a row of `pattern`.
pub fn weighted_predictor_hessian(model: &Model, pattern: &SparseMatrix, u: &[f64], w: &[f64]) -> Result<SparseSym> {
    let d = u.len();
    let mut pairs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..pattern.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let cols: BTreeSet<usize> = pattern.row(i).0.iter().copied().collect();
        let cols: Vec<usize> = cols.into_iter().collect();
        for (a, &j) in cols.iter().enumerate() {
            for &k in &cols[a..] {
                pairs.entry((j, k)).or_default().push(i);
            }
        }
    }
    let h = HESSIAN_STEP;
    let eval = |shifts: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut v = u.to_vec();
        for &(j, s) in shifts {
            v[j] += s;
        }
        eta_nonlinear(model, &v)
    };
    let f0 = eta_nonlinear(model, u)?;
    let mut single: BTreeMap<(usize, i8), Vec<f64>> = BTreeMap::new();
    let mut trip = Vec::new();
    for (&(j, k), rows) in &pairs {
        let val: Vec<f64> = if j == k {
            for s in [1i8, -1] {
                if let std::collections::btree_map::Entry::Vacant(e) = single.entry((j, s)) {
                    e.insert(eval(&[(j, s as f64 * h)])?);
                }
            }
            let (p, m) = (&single[&(j, 1)], &single[&(j, -1)]);
            rows.iter().map(|&i| (p[i] - 2.0 * f0[i] + m[i]) / (h * h)).collect()
        } else {
            let pp = eval(&[(j, h), (k, h)])?;
            let pm = eval(&[(j, h), (k, -h)])?;
            let mp = eval(&[(j, -h), (k, h)])?;
            let mm = eval(&[(j, -h), (k, -h)])?;
            rows.iter().map(|&i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * h * h)).collect()
        };
        let g: f64 = rows.iter().zip(&val).map(|(&i, v)| w[i] * v).sum();
        if g != 0.0 {
            trip.push((j, k, g));
        }
    }
    SparseSym::from_triplets(d.max(1), &trip)
}

// tr(G M) for symmetric G using columns of M from `col`
fn trace_product(g: &SparseSym, col: &mut impl FnMut(usize) -> Vec<f64>) -> f64 {
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut t = 0.0;
    for (i, j, v) in g.iter() {
        let c = cache.entry(j).or_insert_with(|| col(j));
        t += if i == j { v * c[i] } else { 2.0 * v * c[i] };
    }
    t
}

/// K-L divergences between `N(m̄, Q̄⁻¹)` and the corrected `N(m̃, Q̃⁻¹)` with
/// `Q̃ = Q̄ − G`, `Q̃ m̃ = Q̄ m̄ − G u*`.
pub fn kl_from_parts(q_bar: &SparseSym, g: &SparseSym, m_bar: &[f64], u_star: &[f64]) -> Result<KlReport> {
    let g_norm = g.iter().map(|(i, j, v)| if i == j { v * v } else { 2.0 * v * v }).sum::<f64>().sqrt();
    if g.nnz() == 0 || g_norm == 0.0 {
        return Ok(KlReport { kl_lin_to_nonlin: 0.0, kl_nonlin_to_lin: 0.0, g_matrix_norm: 0.0 });
    }
    let q_tilde = q_bar.add(&g.scale(-1.0))?;
    let f_bar: CholFactor = chol(q_bar)?;
    let f_tilde = chol(&q_tilde).map_err(|_| {
        Error::NonlinearityTooStrong("Q̄ − G is not positive definite; the non-linearity is too strong for a Gaussian comparison".into())
    })?;
    let rhs: Vec<f64> = q_bar.mul_vec(m_bar).iter().zip(g.mul_vec(u_star)).map(|(a, b)| a - b).collect();
    let m_tilde = f_tilde.solve(&rhs)?;
    let diff: Vec<f64> = m_bar.iter().zip(&m_tilde).map(|(a, b)| a - b).collect();
    let tr_bar = trace_product(g, &mut |j| f_bar.inverse_column(j));
    let tr_tilde = trace_product(g, &mut |j| f_tilde.inverse_column(j));
    let ld = f_bar.log_det() - f_tilde.log_det();
    let kl_lin_to_nonlin = 0.5 * (ld - tr_bar + q_tilde.quad_form(&diff));
    let kl_nonlin_to_lin = 0.5 * (-ld + tr_tilde + q_bar.quad_form(&diff));
    Ok(KlReport { kl_lin_to_nonlin, kl_nonlin_to_lin, g_matrix_norm: g_norm })
}

/// Both K-L divergences at the θ posterior mode.
pub fn kl_divergences(fit: &FitResult) -> Result<KlReport> {
    let point = fit.mode_point();
    let lin = &fit.linearisation;
    let q_bar = &point.approx.q_star;
    if fit.model.is_linear() {
        let g = SparseSym::from_triplets(q_bar.n(), &[])?;
        return kl_from_parts(q_bar, &g, &point.approx.mode, &lin.u0);
    }
    let obs = ObsModel::new(&fit.model, lin, &point.theta)?;
    let eta_star = eta_nonlinear(&fit.model, &lin.u0)?;
    let (g_star, _) = obs.grad_hess(&eta_star);
    let g = weighted_predictor_hessian(&fit.model, &lin.b, &lin.u0, &g_star)?;
    kl_from_parts(q_bar, &g, &point.approx.mode, &lin.u0)
}
