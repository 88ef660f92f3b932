//! Simulation-based calibration: prior-predictive replication, rank
//! statistics and uniformity tests.
//!
//! Rank statistics only detect miscalibration of the chosen functional `h`;
//! some kinds of posterior error leave them uniform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::expr::PredictorExpr;
use crate::inference::{fit, sample_latent, ExprEvaluator, Kriging};
use crate::latent::HyperPrior;
use crate::likelihood::simulate;
use crate::model::Model;
use crate::sparse::chol;

const MAX_FAILURE_RATE: f64 = 0.1;
const KS_TERMS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbcResult {
    /// `m/J − 1/(2J)` per successful replicate, in replicate order.
    pub w_values: Vec<f64>,
    /// Number of posterior draws below the truth, per successful replicate.
    pub ranks: Vec<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub failures: usize,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
}

/// Produces `j` posterior draws of the functional for one simulated data
/// set. `model` carries the simulated responses.
pub trait PosteriorSampler: Sync {
    fn sample_h(&self, model: &Model, h: &ExprEvaluator, j: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// The iterated Laplace fit followed by mixture sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitSampler;

impl PosteriorSampler for FitSampler {
    fn sample_h(&self, model: &Model, h: &ExprEvaluator, j: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let f = fit(model)?;
        sample_latent(&f, j, rng)?.iter().map(|u| Ok(h.eval(model, u)?[0])).collect()
    }
}

impl<F> PosteriorSampler for F
where
    F: Fn(&Model, &ExprEvaluator, usize, &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    fn sample_h(&self, model: &Model, h: &ExprEvaluator, j: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self(model, h, j, rng)
    }
}

/// Draws `(θ, u)` from the prior and a data set from the observation model.
/// Returns the model with its responses replaced, and the true `u`.
pub fn simulate_prior_predictive(model: &Model, rng: &mut ChaCha8Rng) -> Result<(Model, Vec<f64>)> {
    let mut theta = Vec::new();
    for hp in model.free_hypers() {
        theta.push(match hp.prior {
            HyperPrior::LogGamma { shape, rate } => Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::Calibration(format!("{}: {e}", hp.name)))?
                .sample(rng)
                .ln(),
            HyperPrior::Gaussian { mean, prec } => Normal::new(mean, 1.0 / prec.sqrt())
                .map_err(|e| Error::Calibration(format!("{}: {e}", hp.name)))?
                .sample(rng),
            HyperPrior::Fixed(v) => v,
        });
    }
    let (q, cons) = model.prior_precision(&theta)?;
    let factor = chol(&q)?;
    let z: Vec<f64> = (0..model.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let mut u = factor.solve_lt(&z)?;
    if let Some(k) = Kriging::new(&factor, &cons)? {
        k.project(&mut u);
    }
    for (ui, m) in u.iter_mut().zip(model.prior_mean()) {
        *ui += m;
    }
    let tm = model.theta_map(&theta);
    let mut sim = model.clone();
    for l in &mut sim.likelihoods {
        let eta = l.eta(model, &u)?;
        l.y = simulate(l.family, &eta, l.obs_precision(&tm)?, rng)?;
    }
    Ok((sim, u))
}

/// `(1/J) Σ 𝕀(h_j < h_true) − 1/(2J)` together with the count.
pub fn rank_statistic(draws: &[f64], truth: f64) -> (usize, f64) {
    let j = draws.len() as f64;
    let m = draws.iter().filter(|&&h| h < truth).count();
    (m, m as f64 / j - 0.5 / j)
}

fn replicate(model: &Model, h: &ExprEvaluator, j: usize, seed: u64, k: usize, sampler: &dyn PosteriorSampler) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let (sim, u) = simulate_prior_predictive(model, &mut rng)?;
    let truth = h.eval(model, &u)?[0];
    let draws = sampler.sample_h(&sim, h, j, &mut rng)?;
    if draws.len() != j {
        return Err(Error::DimensionMismatch { expected: j, got: draws.len() });
    }
    Ok(rank_statistic(&draws, truth))
}

/// Runs `k` prior-predictive replicates with `j` posterior draws each.
/// Replicate `r` uses stream `r` of a ChaCha generator keyed by `seed`.
/// `n_data`, when given, must equal the total number of observations.
pub fn sbc_run(
    model: &Model,
    h: &PredictorExpr,
    k: usize,
    j: usize,
    n_data: Option<usize>,
    seed: u64,
    sampler: &dyn PosteriorSampler,
) -> Result<SbcResult> {
    if k == 0 || j == 0 {
        return Err(Error::Calibration("K and J must be positive".into()));
    }
    let n_obs: usize = model.likelihoods.iter().map(|l| l.n_obs()).sum();
    if let Some(n) = n_data.filter(|&n| n != n_obs) {
        return Err(Error::Calibration(format!("the model has {n_obs} observations, not {n}")));
    }
    let ev = ExprEvaluator::new(model, h, None)?;
    let outcomes: Vec<Result<(usize, f64)>> = (0..k).into_par_iter().map(|r| replicate(model, &ev, j, seed, r, sampler)).collect();
    let mut ranks = Vec::with_capacity(k);
    let mut w_values = Vec::with_capacity(k);
    let mut errors = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((m, w)) => {
                ranks.push(m);
                w_values.push(w);
            }
            Err(e) => errors.push(format!("replicate {r}: {e}")),
        }
    }
    let failures = errors.len();
    if failures as f64 > MAX_FAILURE_RATE * k as f64 || ranks.is_empty() {
        let shown: Vec<&str> = errors.iter().take(5).map(String::as_str).collect();
        return Err(Error::Calibration(format!("{failures} of {k} replicates failed; first: {}", shown.join("; "))));
    }
    let (ks_statistic, ks_pvalue) = ks_statistic(&rank_midpoints(&ranks, j))?;
    Ok(SbcResult { w_values, ranks, k, j, failures, ks_statistic, ks_pvalue })
}

/// Ranks on `{0..J}` placed at the centres of `J + 1` equal cells of (0, 1).
pub fn rank_midpoints(ranks: &[usize], j: usize) -> Vec<f64> {
    ranks.iter().map(|&m| (m as f64 + 0.5) / (j as f64 + 1.0)).collect()
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    // below 0.2 the survival probability is 1 to within 1e-12
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=KS_TERMS {
        let t = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        s += if j % 2 == 1 { t } else { -t };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov distance to Uniform(0, 1) and its
/// asymptotic p-value.
pub fn ks_statistic(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Calibration("KS test on an empty sample".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Calibration(format!("KS value {v} outside (0, 1)")));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x.iter().enumerate().fold(0.0f64, |d, (i, &xi)| {
        let i = i as f64;
        d.max((i + 1.0) / n - xi).max(xi - i / n)
    });
    Ok((d, kolmogorov_sf(n.sqrt() * d)))
}

/// Pearson chi-square test of uniformity of ranks on `{0..J}`.
pub fn rank_chi_square(ranks: &[usize], j: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() || j == 0 {
        return Err(Error::Calibration("chi-square test needs ranks and J > 0".into()));
    }
    let mut counts = vec![0usize; j + 1];
    for &m in ranks {
        *counts.get_mut(m).ok_or_else(|| Error::Calibration(format!("rank {m} exceeds J = {j}")))? += 1;
    }
    let expected = ranks.len() as f64 / (j + 1) as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new(j as f64).map_err(|e| Error::Calibration(e.to_string()))?;
    Ok((stat, dist.sf(stat)))
}

/// Counts of `values` in `bins` equal-width cells of [0, 1]; values outside
/// are clamped to the end cells.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}
