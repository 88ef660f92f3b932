use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::{log_posterior_theta, GaussApprox, Linearisation};
use crate::error::{Error, Result};
use crate::model::Model;

const HESSIAN_STEP: f64 = 0.02;
const GRADIENT_STEP: f64 = 1e-4;
const MAX_ASCENT_STEPS: usize = 200;
// Largest move per ascent step, in any internal θ coordinate.
const MAX_STEP: f64 = 1.0;
const ASCENT_TOL: f64 = 1e-9;
const GRID_STEP: f64 = 0.75;
const GRID_DROP: f64 = 5.0;
const GRID_MAX_STEPS: i32 = 12;
// Largest standard deviation allowed for a poorly identified θ direction.
const MIN_CURVATURE: f64 = 1e-2;

/// One hyperparameter integration point.
#[derive(Debug, Clone)]
pub struct ThetaPoint {
    /// Internal-scale values, in `Model::theta_names` order.
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub approx: GaussApprox,
}

/// Posterior mode of θ for a fixed linearisation, by damped Newton ascent
/// from `start` with finite-difference derivatives. The search is local on
/// purpose: a linearised posterior can have distant modes that the
/// non-linear model does not share, and the iteration should follow the
/// mode it is already tracking.
pub fn theta_mode(model: &Model, lin: &Linearisation, start: &[f64]) -> Result<(Vec<f64>, f64, GaussApprox)> {
    let (mut lp, mut ga) = log_posterior_theta(model, lin, start, None)?;
    if !lp.is_finite() {
        return Err(Error::Optimizer("log posterior of θ is not finite at the starting point".into()));
    }
    let mut x = start.to_vec();
    if x.is_empty() {
        return Ok((x, lp, ga));
    }
    for _ in 0..MAX_ASCENT_STEPS {
        let warm = ga.mode.clone();
        let f = |t: &[f64]| log_posterior_theta(model, lin, t, Some(&warm)).map(|r| r.0);
        let g = DVector::from_vec(gradient(f, &x)?);
        let newton = neg_hessian(f, &x, lp).ok().and_then(|h| h.cholesky()).map(|ch| ch.solve(&g));
        let mut step = newton.filter(|s| s.dot(&g) > 0.0).unwrap_or_else(|| g.clone());
        let size = step.amax();
        if size > MAX_STEP {
            step *= MAX_STEP / size;
        }
        let mut t = 1.0;
        let mut moved = false;
        while t * step.amax() >= ASCENT_TOL {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Ok((lc, gc)) = log_posterior_theta(model, lin, &cand, Some(&warm)) {
                if lc >= lp {
                    (x, lp, ga) = (cand, lc, gc);
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved || t * step.amax() < ASCENT_TOL {
            return Ok((x, lp, ga));
        }
    }
    Err(Error::Optimizer(format!("θ mode search did not converge in {MAX_ASCENT_STEPS} steps")))
}

fn gradient(f: impl Fn(&[f64]) -> Result<f64> + Sync, x: &[f64]) -> Result<Vec<f64>> {
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += GRADIENT_STEP;
            let fp = f(&p)?;
            p[i] -= 2.0 * GRADIENT_STEP;
            Ok((fp - f(&p)?) / (2.0 * GRADIENT_STEP))
        })
        .collect()
}

fn neg_hessian(f: impl Fn(&[f64]) -> Result<f64> + Sync, x: &[f64], f0: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let h = HESSIAN_STEP;
    let mut offsets: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..n {
        offsets.push(vec![(i, h)]);
        offsets.push(vec![(i, -h)]);
        for j in i + 1..n {
            for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                offsets.push(vec![(i, si), (j, sj)]);
            }
        }
    }
    let vals: Vec<f64> = offsets
        .par_iter()
        .map(|o| {
            let mut p = x.to_vec();
            for &(i, d) in o {
                p[i] += d;
            }
            f(&p)
        })
        .collect::<Result<_>>()?;
    let mut it = vals.into_iter();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let (fp, fm) = (it.next().unwrap(), it.next().unwrap());
        hess[(i, i)] = -(fp - 2.0 * f0 + fm) / (h * h);
        for j in i + 1..n {
            let (pp, pm, mp, mm) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            let v = -(pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Mode search, curvature at the mode, and a standardised grid over θ with
/// normalised integration weights. The first point is the mode.
pub fn theta_explore(model: &Model, lin: &Linearisation, start: &[f64]) -> Result<Vec<ThetaPoint>> {
    let (mode, lp0, ga0) = theta_mode(model, lin, start)?;
    if mode.is_empty() {
        return Ok(vec![ThetaPoint { theta: mode, log_post: lp0, weight: 1.0, approx: ga0 }]);
    }
    let n = mode.len();
    let warm = ga0.mode.clone();
    let eval = |t: &[f64]| log_posterior_theta(model, lin, t, Some(&warm));
    let neg_h = neg_hessian(|t| eval(t).map(|r| r.0), &mode, lp0)?;
    let eig = SymmetricEigen::new(neg_h);
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let floor = MIN_CURVATURE.max(1e-8 * lam_max);
    let scale: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 / l.max(floor).sqrt()).collect();
    let to_theta = |z: &[i32]| -> Vec<f64> {
        (0..n)
            .map(|i| mode[i] + (0..n).map(|j| eig.eigenvectors[(i, j)] * scale[j] * GRID_STEP * z[j] as f64).sum::<f64>())
            .collect()
    };

    let mut known: BTreeMap<Vec<i32>, (f64, GaussApprox)> = BTreeMap::new();
    known.insert(vec![0; n], (lp0, ga0));
    let mut extent = vec![(0i32, 0i32); n];
    for j in 0..n {
        for dir in [-1i32, 1] {
            for s in 1..=GRID_MAX_STEPS {
                let mut z = vec![0; n];
                z[j] = dir * s;
                let (lp, ga) = eval(&to_theta(&z))?;
                let inside = lp >= lp0 - GRID_DROP;
                known.insert(z, (lp, ga));
                if !inside {
                    break;
                }
                if dir < 0 {
                    extent[j].0 = -s;
                } else {
                    extent[j].1 = s;
                }
            }
        }
    }
    let mut grid_z: Vec<Vec<i32>> = vec![vec![]];
    for &(lo, hi) in &extent {
        grid_z = grid_z.into_iter().flat_map(|p| (lo..=hi).map(move |v| [p.clone(), vec![v]].concat())).collect();
    }
    let fresh: Vec<Vec<i32>> = grid_z.iter().filter(|z| !known.contains_key(*z)).cloned().collect();
    let evaluated: Vec<(f64, GaussApprox)> = fresh.par_iter().map(|z| eval(&to_theta(z))).collect::<Result<_>>()?;
    known.extend(fresh.into_iter().zip(evaluated));

    let zero = vec![0; n];
    let mut order = vec![zero.clone()];
    order.extend(grid_z.into_iter().filter(|z| *z != zero));
    let lp_max = order.iter().map(|z| known[z].0).fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<Vec<i32>> = order.into_iter().filter(|z| known[z].0 >= lp_max - GRID_DROP).collect();
    let mut points: Vec<ThetaPoint> = kept
        .into_iter()
        .map(|z| {
            let (lp, ga) = known.remove(&z).expect("evaluated");
            ThetaPoint { theta: to_theta(&z), log_post: lp, weight: (lp - lp_max).exp(), approx: ga }
        })
        .collect();
    if points.first().is_none_or(|p| p.theta != mode) {
        return Err(Error::Optimizer("the θ mode fell outside its own grid".into()));
    }
    let total: f64 = points.iter().map(|p| p.weight).sum();
    for p in &mut points {
        p.weight /= total;
    }
    Ok(points)
}
