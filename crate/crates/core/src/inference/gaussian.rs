use nalgebra::DMatrix;

use super::{Linearisation, ObsModel};
use crate::error::{Error, Result};
use crate::model::{Constraints, Model};
use crate::sparse::{chol, CholFactor, SparseMatrix, SparseSym};

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 50;

/// Conditioning-by-kriging data for the sum-to-zero constraints `A x = 0`
/// under a Gaussian with precision factor `L`.
#[derive(Debug, Clone)]
pub struct Kriging {
    pub rows: Constraints,
    /// `Q⁻¹ a_r` per constraint.
    w: Vec<Vec<f64>>,
    s_inv: DMatrix<f64>,
    /// `ln det(A Q⁻¹ Aᵀ)`
    pub log_det_s: f64,
}

impl Kriging {
    pub fn new(factor: &CholFactor, rows: &Constraints) -> Result<Option<Kriging>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let n = factor.n();
        let k = rows.len();
        let mut w = Vec::with_capacity(k);
        for r in rows {
            let mut a = vec![0.0; n];
            for &i in r {
                a[i] = 1.0;
            }
            w.push(factor.solve(&a)?);
        }
        let s = DMatrix::from_fn(k, k, |r, c| rows[c].iter().map(|&i| w[r][i]).sum::<f64>());
        let s = (&s + s.transpose()) * 0.5;
        let ch = s.clone().cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0, value: s[(0, 0)] })?;
        let log_det_s = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Some(Kriging { rows: rows.clone(), w, s_inv: ch.inverse(), log_det_s }))
    }

    /// `x ← x − Q⁻¹Aᵀ (A Q⁻¹ Aᵀ)⁻¹ A x`
    pub fn project(&self, x: &mut [f64]) {
        let ax: Vec<f64> = self.rows.iter().map(|r| r.iter().map(|&i| x[i]).sum()).collect();
        for (r, wr) in self.w.iter().enumerate() {
            let c: f64 = (0..ax.len()).map(|s| self.s_inv[(r, s)] * ax[s]).sum();
            for (xi, wi) in x.iter_mut().zip(wr) {
                *xi -= c * wi;
            }
        }
    }

    fn quad(&self, t: &[f64]) -> f64 {
        let k = t.len();
        (0..k).map(|r| (0..k).map(|s| t[r] * self.s_inv[(r, s)] * t[s]).sum::<f64>()).sum()
    }

    /// Reduction of each marginal variance caused by the constraints.
    pub fn variance_correction(&self) -> Vec<f64> {
        let n = self.w.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| {
                let t: Vec<f64> = self.w.iter().map(|w| w[i]).collect();
                self.quad(&t)
            })
            .collect()
    }
}

/// Gaussian approximation `N(mode, Q*⁻¹)` of `p(u | θ, y)`, conditioned on
/// any sum-to-zero constraints.
#[derive(Debug, Clone)]
pub struct GaussApprox {
    pub mode: Vec<f64>,
    pub q_star: SparseSym,
    pub factor: CholFactor,
    pub kriging: Option<Kriging>,
}

impl GaussApprox {
    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        let mut v = self.factor.diag_inverse();
        if let Some(k) = &self.kriging {
            for (vi, c) in v.iter_mut().zip(k.variance_correction()) {
                *vi -= c;
            }
        }
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    /// Row-wise `diag(B Σ Bᵀ)` under the constrained covariance.
    pub fn row_variances(&self, b: &SparseMatrix) -> Vec<f64> {
        let mut cols: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
        (0..b.nrows())
            .map(|i| {
                let (idx, val) = b.row(i);
                for &j in idx {
                    cols.entry(j).or_insert_with(|| self.factor.inverse_column(j));
                }
                let mut v = 0.0;
                for (a, &ja) in idx.iter().enumerate() {
                    let col = &cols[&ja];
                    for (c, &jc) in idx.iter().enumerate() {
                        v += val[a] * val[c] * col[jc];
                    }
                }
                if let Some(k) = &self.kriging {
                    let t: Vec<f64> = k.w.iter().map(|w| idx.iter().zip(val).map(|(&j, x)| x * w[j]).sum()).collect();
                    v -= k.quad(&t);
                }
                v.max(0.0)
            })
            .collect()
    }

    /// Draw `mode + x` with `x ~ N(0, Q*⁻¹)` conditioned on the constraints,
    /// from standard normals `z`.
    pub fn sample(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.factor.solve_lt(z)?;
        if let Some(k) = &self.kriging {
            k.project(&mut x);
        }
        for (xi, m) in x.iter_mut().zip(&self.mode) {
            *xi += m;
        }
        Ok(x)
    }
}

fn objective(q: &SparseSym, mu: &[f64], lin: &Linearisation, obs: &ObsModel, u: &[f64]) -> f64 {
    let r: Vec<f64> = u.iter().zip(mu).map(|(a, b)| a - b).collect();
    match obs.loglik(&lin.eta_bar(u)) {
        Ok(ll) => ll - 0.5 * q.quad_form(&r),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn precision_at(q: &SparseSym, lin: &Linearisation, obs: &ObsModel, u: &[f64]) -> Result<(SparseSym, Vec<f64>)> {
    let (g, h) = obs.grad_hess(&lin.eta_bar(u));
    if let Some(i) = g.iter().chain(&h).position(|x| !x.is_finite()) {
        return Err(Error::Newton(format!("non-finite likelihood derivative at row {}", i % g.len().max(1))));
    }
    let w: Vec<f64> = h.iter().map(|x| -x).collect();
    let qs = if lin.n_rows() == 0 { q.clone() } else { q.add(&lin.b.weighted_gram(&w))? };
    Ok((qs, g))
}

/// Newton iteration for the mode of the linearised model.
pub(crate) fn newton(
    q: &SparseSym,
    mu: &[f64],
    constraints: &Constraints,
    lin: &Linearisation,
    obs: &ObsModel,
    start: &[f64],
) -> Result<GaussApprox> {
    let n = q.n();
    let mut u = start.to_vec();
    for r in constraints {
        let m = r.iter().map(|&i| u[i]).sum::<f64>() / r.len() as f64;
        for &i in r {
            u[i] -= m;
        }
    }
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let (qs, g) = precision_at(q, lin, obs, &u)?;
        let fac = chol(&qs)?;
        let r: Vec<f64> = mu.iter().zip(&u).map(|(a, b)| a - b).collect();
        let mut rhs = q.mul_vec(&r);
        if lin.n_rows() > 0 {
            for (x, y) in rhs.iter_mut().zip(lin.b.tmul_vec(&g)) {
                *x += y;
            }
        }
        let mut step = fac.solve(&rhs)?;
        if let Some(k) = Kriging::new(&fac, constraints)? {
            let mut target: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b).collect();
            k.project(&mut target);
            step = target.iter().zip(&u).map(|(a, b)| a - b).collect();
        }
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Newton("non-finite Newton step".into()));
        }
        let f0 = objective(q, mu, lin, obs, &u);
        let mut t = 1.0;
        let cand = loop {
            let cand: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            let f = objective(q, mu, lin, obs, &cand);
            if f.is_finite() && f >= f0 - 1e-12 * (1.0 + f0.abs()) {
                break cand;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::Newton("step halving failed to improve the objective".into()));
            }
        };
        let size = step.iter().fold(0.0f64, |m, s| m.max((t * s).abs()));
        u = cand;
        if size < NEWTON_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Newton(format!("no convergence in {NEWTON_MAX_ITER} iterations (dimension {n})")));
    }
    let (q_star, _) = precision_at(q, lin, obs, &u)?;
    let factor = chol(&q_star)?;
    let kriging = Kriging::new(&factor, constraints)?;
    Ok(GaussApprox { mode: u, q_star, factor, kriging })
}

/// Gaussian approximation of `p(u | θ, y)` for the linearised model.
pub fn gaussian_approx(model: &Model, lin: &Linearisation, theta: &[f64], start: Option<&[f64]>) -> Result<GaussApprox> {
    let (q, cons) = model.prior_precision(theta)?;
    let obs = ObsModel::new(model, lin, theta)?;
    newton(&q, &model.prior_mean(), &cons, lin, &obs, start.unwrap_or(&lin.u0))
}

/// Laplace approximation of `log p(θ | y)` (unnormalised) for the
/// linearised model, with the Gaussian approximation at `θ`.
pub fn log_posterior_theta(
    model: &Model,
    lin: &Linearisation,
    theta: &[f64],
    start: Option<&[f64]>,
) -> Result<(f64, GaussApprox)> {
    let (q, cons) = model.prior_precision(theta)?;
    let obs = ObsModel::new(model, lin, theta)?;
    let mu = model.prior_mean();
    let ga = newton(&q, &mu, &cons, lin, &obs, start.unwrap_or(&lin.u0))?;
    let fq = chol(&q)?;
    let r: Vec<f64> = ga.mode.iter().zip(&mu).map(|(a, b)| a - b).collect();
    let mut lp = model.log_prior_theta(theta) + 0.5 * fq.log_det() - 0.5 * q.quad_form(&r);
    if let Some(k) = Kriging::new(&fq, &cons)? {
        lp += 0.5 * k.log_det_s;
    }
    lp += obs.loglik(&lin.eta_bar(&ga.mode))?;
    lp -= 0.5 * ga.factor.log_det();
    if let Some(k) = &ga.kriging {
        lp -= 0.5 * k.log_det_s;
    }
    if !lp.is_finite() {
        return Err(Error::Optimizer(format!("log posterior of theta is not finite at {theta:?}")));
    }
    Ok((lp, ga))
}
