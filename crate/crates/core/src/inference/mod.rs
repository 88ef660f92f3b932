//! Laplace approximations for latent Gaussian models with non-linear
//! predictors, via iterated linearisation.

mod fit;
mod gaussian;
mod line_search;
mod sample;
mod theta;

pub use fit::{fit, marginals, FitResult, IterationRecord, LatentSummary};
pub use gaussian::{gaussian_approx, log_posterior_theta, GaussApprox, Kriging};
pub use line_search::{cubic_roots, line_search, LineSearch};
pub use sample::{generate, predict_summary, sample_latent, ExprEvaluator, RowSummary};
pub use theta::{theta_explore, theta_mode, ThetaPoint};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::likelihood::{grad_hess, loglik, Family};
use crate::model::Model;
use crate::sparse::SparseMatrix;

/// First-order expansion `η̄(u) = δ + B u` of the stacked predictors of all
/// likelihoods around `u0`.
#[derive(Debug, Clone)]
pub struct Linearisation {
    pub u0: Vec<f64>,
    pub b: SparseMatrix,
    pub delta: Vec<f64>,
    /// `η̃(u0)`
    pub eta0: Vec<f64>,
    /// Row range of each likelihood in the stacked predictor.
    pub blocks: Vec<Range<usize>>,
}

impl Linearisation {
    pub fn eta_bar(&self, u: &[f64]) -> Vec<f64> {
        let mut eta = self.b.mul_vec(u);
        for (e, d) in eta.iter_mut().zip(&self.delta) {
            *e += d;
        }
        eta
    }

    pub fn n_rows(&self) -> usize {
        self.delta.len()
    }
}

/// Stacked non-linear predictor `η̃(u)`.
pub fn eta_nonlinear(model: &Model, u: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for l in &model.likelihoods {
        out.extend(l.eta(model, u)?);
    }
    Ok(out)
}

pub fn linearise(model: &Model, u0: &[f64]) -> Result<Linearisation> {
    if u0.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: u0.len() });
    }
    let mut etas = Vec::new();
    let mut mats = Vec::new();
    let mut blocks = Vec::new();
    for l in &model.likelihoods {
        let (eta, b) = l.eta_jacobian(model, u0)?;
        if let Some(i) = eta.iter().position(|e| !e.is_finite()) {
            return Err(Error::Eval { row: i, msg: format!("predictor {} is {} at the linearisation point", l.name, eta[i]) });
        }
        blocks.push(etas.len()..etas.len() + eta.len());
        etas.extend(eta);
        mats.push(b);
    }
    let b = SparseMatrix::vstack(&mats)?;
    let bu = b.mul_vec(u0);
    let delta = etas.iter().zip(&bu).map(|(e, x)| e - x).collect();
    Ok(Linearisation { u0: u0.to_vec(), b, delta, eta0: etas, blocks })
}

/// Per-likelihood observation models bound to a θ value.
pub(crate) struct ObsModel<'a> {
    parts: Vec<(Family, &'a [f64], f64, Range<usize>)>,
}

impl<'a> ObsModel<'a> {
    pub(crate) fn new(model: &'a Model, lin: &Linearisation, theta: &[f64]) -> Result<Self> {
        let tm = model.theta_map(theta);
        let mut parts = Vec::with_capacity(model.likelihoods.len());
        for (l, r) in model.likelihoods.iter().zip(&lin.blocks) {
            parts.push((l.family, l.y.as_slice(), l.obs_precision(&tm)?, r.clone()));
        }
        Ok(ObsModel { parts })
    }

    pub(crate) fn loglik(&self, eta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (fam, y, tau, r) in &self.parts {
            total += loglik(*fam, y, &eta[r.clone()], *tau)?;
        }
        Ok(total)
    }

    pub(crate) fn grad_hess(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; eta.len()];
        let mut h = vec![0.0; eta.len()];
        for (fam, y, tau, r) in &self.parts {
            let (gi, hi) = grad_hess(*fam, y, &eta[r.clone()], *tau);
            g[r.clone()].copy_from_slice(&gi);
            h[r.clone()].copy_from_slice(&hi);
        }
        (g, h)
    }
}
