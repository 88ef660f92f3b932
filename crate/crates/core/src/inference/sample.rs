use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::FitResult;
use crate::error::{Error, Result};
use crate::expr::{eval_expr, PredictorExpr};
use crate::mappers::{Mapper, MapperInput};
use crate::model::{leaf_mapper, DataTable, Model};

const MODE_BINS: usize = 512;

/// A predictor expression bound to component mappers over a data table.
/// Plain component references are evaluated on `table`, or on the first
/// likelihood's data when no table is given.
#[derive(Debug, Clone)]
pub struct ExprEvaluator {
    expr: PredictorExpr,
    mappers: BTreeMap<String, (usize, Mapper, MapperInput)>,
    rows: usize,
}

impl ExprEvaluator {
    pub fn new(model: &Model, expr: &PredictorExpr, table: Option<&DataTable>) -> Result<Self> {
        let table = table.unwrap_or(&model.likelihoods[0].table);
        let mut mappers = BTreeMap::new();
        for leaf in expr.body.leaves() {
            let entry = leaf_mapper(&model.components, &leaf, table)?;
            mappers.insert(leaf, entry);
        }
        let rows = mappers.values().map(|(_, m, input)| m.ibm_n_output(input)).max().unwrap_or(1);
        Ok(ExprEvaluator { expr: expr.clone(), mappers, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn eval(&self, model: &Model, u: &[f64]) -> Result<Vec<f64>> {
        let mut effects = BTreeMap::new();
        for (name, (ci, mapper, input)) in &self.mappers {
            effects.insert(name.clone(), mapper.ibm_eval(input, &u[model.components[*ci].range()])?);
        }
        eval_expr(&self.expr.body, &effects, self.rows)
    }
}

/// Draws latent vectors from the fitted grid mixture.
pub fn sample_latent(fit: &FitResult, n_samples: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let cdf: Vec<f64> = fit
        .grid
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.weight;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().ok_or_else(|| Error::Data("fit has an empty θ grid".into()))?;
    let d = fit.model.dim();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let r: f64 = rng.random::<f64>() * total;
        let m = cdf.iter().position(|&c| r < c).unwrap_or(cdf.len() - 1);
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        out.push(fit.grid[m].approx.sample(&z)?);
    }
    Ok(out)
}

/// Posterior samples of `expr`, one vector (over prediction rows) per
/// sample.
pub fn generate(fit: &FitResult, expr: &PredictorExpr, table: Option<&DataTable>, n_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let ev = ExprEvaluator::new(&fit.model, expr, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent(fit, n_samples, &mut rng)?.iter().map(|u| ev.eval(&fit.model, u)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub mean: f64,
    pub sd: f64,
    pub quantiles: Vec<f64>,
    /// Mean of the samples in the fullest bin of a 512-bin histogram.
    pub mode: f64,
}

fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn histogram_mode(sorted: &[f64]) -> f64 {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi <= lo {
        return lo;
    }
    let width = (hi - lo) / MODE_BINS as f64;
    let mut sums = vec![(0usize, 0.0); MODE_BINS];
    for &x in sorted {
        let b = (((x - lo) / width) as usize).min(MODE_BINS - 1);
        sums[b].0 += 1;
        sums[b].1 += x;
    }
    let mut best = 0;
    for (b, s) in sums.iter().enumerate() {
        if s.0 > sums[best].0 {
            best = b;
        }
    }
    sums[best].1 / sums[best].0 as f64
}

/// Per-row mean, sd, type-7 quantiles and histogram mode of `samples`
/// (one vector per sample).
pub fn predict_summary(samples: &[Vec<f64>], quantiles: &[f64]) -> Result<Vec<RowSummary>> {
    if samples.len() < 2 {
        return Err(Error::Data("at least two samples are needed for a summary".into()));
    }
    if let Some(q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Data(format!("quantile {q} outside [0, 1]")));
    }
    let rows = samples[0].len();
    if samples.iter().any(|s| s.len() != rows) {
        return Err(Error::DimensionMismatch { expected: rows, got: samples.iter().map(Vec::len).find(|&l| l != rows).unwrap_or(0) });
    }
    let n = samples.len() as f64;
    Ok((0..rows)
        .map(|i| {
            let mut col: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            col.sort_by(f64::total_cmp);
            RowSummary {
                mean,
                sd: var.sqrt(),
                quantiles: quantiles.iter().map(|&p| quantile_type7(&col, p)).collect(),
                mode: histogram_mode(&col),
            }
        })
        .collect())
}
