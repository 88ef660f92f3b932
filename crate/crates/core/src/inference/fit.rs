use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{eta_nonlinear, line_search, linearise, log_posterior_theta, theta_explore, theta_mode, Linearisation, ThetaPoint};
use crate::error::{Error, Result};
use crate::model::Model;

const ALPHA_BAND: f64 = 0.05;
const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub alpha: f64,
    pub max_dev_over_sd: f64,
    pub mean_dev_over_sd: f64,
    /// θ mode used in this iteration (internal scale).
    pub theta: Vec<f64>,
    /// Largest `|change|/sd` within each component.
    pub component_max_change: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub theta_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    /// Integration grid; the first point is the θ mode.
    pub grid: Vec<ThetaPoint>,
    pub linearisation: Linearisation,
    pub latent_summary: Vec<LatentSummary>,
    pub predictor_sigma2: Vec<f64>,
    pub convergence: Vec<IterationRecord>,
    pub converged: bool,
    pub log: Vec<String>,
}

impl FitResult {
    pub fn mode_point(&self) -> &ThetaPoint {
        &self.grid[0]
    }

    /// Rebuilds a fit from a stored linearisation point and θ grid.
    pub fn restore(
        model: Model,
        u0: &[f64],
        grid: &[(Vec<f64>, f64)],
        convergence: Vec<IterationRecord>,
        converged: bool,
    ) -> Result<FitResult> {
        let lin = linearise(&model, u0)?;
        if grid.is_empty() {
            return Err(Error::Data("empty θ grid".into()));
        }
        let mut start = None;
        let mut points = Vec::with_capacity(grid.len());
        for (theta, w) in grid {
            let (lp, ga) = log_posterior_theta(&model, &lin, theta, start.as_deref())?;
            if start.is_none() {
                start = Some(ga.mode.clone());
            }
            points.push(ThetaPoint { theta: theta.clone(), log_post: lp, weight: *w, approx: ga });
        }
        Ok(finish(model, lin, points, convergence, converged, Vec::new()))
    }

    /// Marginal summaries of each hyperparameter on the user scale.
    pub fn hyper_summary(&self) -> Vec<(String, LatentSummary)> {
        let hypers = self.model.free_hypers();
        hypers
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let (mut m1, mut m2) = (0.0, 0.0);
                for p in &self.grid {
                    let v = h.transform.to_user(p.theta[i]);
                    m1 += p.weight * v;
                    m2 += p.weight * v * v;
                }
                (h.name.clone(), LatentSummary { mean: m1, sd: (m2 - m1 * m1).max(0.0).sqrt() })
            })
            .collect()
    }
}

/// Mixture moments of the latent marginals over the θ grid.
pub fn marginals(grid: &[ThetaPoint]) -> Vec<LatentSummary> {
    let d = grid.first().map_or(0, |p| p.approx.dim());
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for p in grid {
        let var = p.approx.marginal_variances();
        for j in 0..d {
            let mu = p.approx.mode[j];
            m1[j] += p.weight * mu;
            m2[j] += p.weight * (var[j] + mu * mu);
        }
    }
    m1.iter().zip(&m2).map(|(&m, &s)| LatentSummary { mean: m, sd: (s - m * m).max(0.0).sqrt() }).collect()
}

fn finish(
    model: Model,
    lin: Linearisation,
    grid: Vec<ThetaPoint>,
    convergence: Vec<IterationRecord>,
    converged: bool,
    log: Vec<String>,
) -> FitResult {
    let latent_summary = marginals(&grid);
    let predictor_sigma2 = grid[0].approx.row_variances(&lin.b);
    FitResult {
        theta_names: model.theta_names(),
        theta_mode: grid[0].theta.clone(),
        model,
        grid,
        linearisation: lin,
        latent_summary,
        predictor_sigma2,
        convergence,
        converged,
        log,
    }
}

// R-style three significant digits
fn signif3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let v: f64 = format!("{x:.2e}").parse().unwrap_or(x);
    format!("{v}")
}

fn deviations(model: &Model, old: &[f64], new: &[f64], sd: &[f64]) -> (f64, f64, BTreeMap<String, f64>) {
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0;
    let mut per = BTreeMap::new();
    for c in &model.components {
        let mut cmax = 0.0f64;
        for i in c.range() {
            if sd[i] > 0.0 {
                let r = (new[i] - old[i]).abs() / sd[i];
                cmax = cmax.max(r);
                sum += r;
                count += 1;
            }
        }
        max = max.max(cmax);
        per.insert(c.spec.name.clone(), cmax);
    }
    (max, if count > 0 { sum / count as f64 } else { 0.0 }, per)
}

/// Iterated linearised INLA.
pub fn fit(model: &Model) -> Result<FitResult> {
    let opts = model.options();
    let max_iter = opts.bru_max_iter;
    let mut log = Vec::new();
    let mut records = Vec::new();
    let mut u0 = model.initial_state();
    let mut theta = model.theta_initial();
    let iterative = !model.is_linear() || opts.bru_force_iterative;

    if !iterative {
        log.push(format!("iinla: Iteration 1 [max:{max_iter}]"));
        log.push("iinla: Linear predictor, single INLA pass.".to_string());
        let lin = linearise(model, &u0)?;
        let grid = theta_explore(model, &lin, &theta)?;
        let sd: Vec<f64> = grid[0].approx.marginal_variances().into_iter().map(f64::sqrt).collect();
        let (max_dev, mean_dev, per) = deviations(model, &u0, &grid[0].approx.mode, &sd);
        records.push(IterationRecord {
            iter: 1,
            alpha: 1.0,
            max_dev_over_sd: max_dev,
            mean_dev_over_sd: mean_dev,
            theta: grid[0].theta.clone(),
            component_max_change: per,
        });
        return Ok(finish(model.clone(), lin, grid, records, true, log));
    }

    let mut converged = false;
    for iter in 1..=max_iter {
        log.push(format!("iinla: Iteration {iter} [max:{max_iter}]"));
        let lin = linearise(model, &u0)?;
        let (th, _, ga) = theta_mode(model, &lin, &theta)?;
        theta = th;
        let sd: Vec<f64> = ga.marginal_variances().into_iter().map(f64::sqrt).collect();
        let sigma2: Vec<f64> = ga.row_variances(&lin.b).into_iter().map(|s| s.max(SIGMA2_FLOOR)).collect();
        let eta_bar1 = lin.eta_bar(&ga.mode);
        let ls = line_search(|u| eta_nonlinear(model, u), &u0, &ga.mode, &lin.eta0, &eta_bar1, &sigma2, opts.gamma)?;
        let (max_dev, mean_dev, per) = deviations(model, &u0, &ls.v, &sd);
        log.push(format!("iinla: Step rescaling: {}", signif3(100.0 * ls.alpha)));
        log.push(format!("iinla: Max deviation from previous: {}", signif3(100.0 * max_dev)));
        log.push(format!("       [stop if: <{}]", signif3(100.0 * opts.rel_tol)));
        records.push(IterationRecord {
            iter,
            alpha: ls.alpha,
            max_dev_over_sd: max_dev,
            mean_dev_over_sd: mean_dev,
            theta: theta.clone(),
            component_max_change: per,
        });
        u0 = ls.v;
        if max_dev < opts.rel_tol && (ls.alpha - 1.0).abs() < ALPHA_BAND {
            converged = true;
            break;
        }
    }
    log.push(if converged { "iinla: Convergence criterion met." } else { "iinla: Maximum iterations reached." }.to_string());
    log.push("       Running final INLA integration step with known theta mode.".to_string());
    log.push(format!("iinla: Iteration {} [max:{max_iter}]", records.len() + 1));
    let lin = linearise(model, &u0)?;
    let grid = theta_explore(model, &lin, &theta)?;
    Ok(finish(model.clone(), lin, grid, records, converged, log))
}
