use crate::error::{Error, Result};

const MAX_SCALE_STEPS: i32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch {
    pub alpha: f64,
    /// `(1 − α) u0 + α u1`
    pub v: Vec<f64>,
    /// Expansion (positive) or contraction (negative) exponent.
    pub k: i32,
}

fn combine(u0: &[f64], u1: &[f64], alpha: f64) -> Vec<f64> {
    u0.iter().zip(u1).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
}

fn vnorm2(x: impl Iterator<Item = f64>, sigma2: &[f64]) -> f64 {
    x.zip(sigma2).map(|(d, s)| d * d / s).sum()
}

/// Real roots of `c3 x³ + c2 x² + c1 x + c0`.
pub fn cubic_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return vec![];
    }
    let mut roots = if c3.abs() <= 1e-13 * scale {
        if c2.abs() <= 1e-13 * scale {
            if c1 == 0.0 {
                vec![]
            } else {
                vec![-c0 / c1]
            }
        } else {
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc < 0.0 {
                vec![]
            } else {
                let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
                let mut r = vec![q / c2];
                if q != 0.0 {
                    r.push(c0 / q);
                }
                r
            }
        }
    } else {
        let (a, b, c) = (c2 / c3, c1 / c3, c0 / c3);
        let q = (a * a - 3.0 * b) / 9.0;
        let r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
        if r * r < q * q * q {
            let th = (r / (q * q * q).sqrt()).clamp(-1.0, 1.0).acos();
            let m = -2.0 * q.sqrt();
            let tau = std::f64::consts::TAU;
            vec![
                m * (th / 3.0).cos() - a / 3.0,
                m * ((th + tau) / 3.0).cos() - a / 3.0,
                m * ((th - tau) / 3.0).cos() - a / 3.0,
            ]
        } else {
            let big = -r.signum() * (r.abs() + (r * r - q * q * q).sqrt()).cbrt();
            let small = if big == 0.0 { 0.0 } else { q / big };
            vec![big + small - a / 3.0]
        }
    };
    let p = |x: f64| ((c3 * x + c2) * x + c1) * x + c0;
    let dp = |x: f64| (3.0 * c3 * x + 2.0 * c2) * x + c1;
    for x in &mut roots {
        for _ in 0..3 {
            let d = dp(*x);
            if d == 0.0 {
                break;
            }
            let nx = *x - p(*x) / d;
            if !nx.is_finite() || p(nx).abs() >= p(*x).abs() {
                break;
            }
            *x = nx;
        }
    }
    roots
}

/// Step size between the previous linearisation point `u0` (α = 0) and the
/// new conditional mode `u1` (α = 1).
///
/// `eta_nl` evaluates the non-linear predictor; `eta_bar0`/`eta_bar1` are
/// the linearised predictor at `u0`/`u1`; `sigma2` weights the norm.
pub fn line_search(
    eta_nl: impl Fn(&[f64]) -> Result<Vec<f64>>,
    u0: &[f64],
    u1: &[f64],
    eta_bar0: &[f64],
    eta_bar1: &[f64],
    sigma2: &[f64],
    gamma: f64,
) -> Result<LineSearch> {
    if sigma2.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::LineSearch("predictor variances must be positive".into()));
    }
    let a: Vec<f64> = eta_bar1.iter().zip(eta_bar0).map(|(x, y)| x - y).collect();
    // η̃(v_β) for β = γ^k, or None when not finite
    let eval = |beta: f64| -> Option<Vec<f64>> {
        eta_nl(&combine(u0, u1, beta)).ok().filter(|e| e.iter().all(|x| x.is_finite()))
    };
    let norm = |eta: &Option<Vec<f64>>| match eta {
        Some(e) => vnorm2(e.iter().zip(eta_bar1).map(|(x, y)| x - y), sigma2),
        None => f64::INFINITY,
    };

    let mut k = 0;
    let mut best = eval(1.0);
    let mut best_norm = norm(&best);
    let mut steps = 0;
    if best_norm.is_infinite() {
        // contract until the predictor is finite again
        while best_norm.is_infinite() && steps < MAX_SCALE_STEPS {
            k -= 1;
            steps += 1;
            best = eval(gamma.powi(k));
            best_norm = norm(&best);
        }
    }
    for dir in [1, -1] {
        if best_norm.is_infinite() || (dir == 1 && k < 0) {
            continue;
        }
        let start = k;
        while steps < MAX_SCALE_STEPS {
            let cand = eval(gamma.powi(k + dir));
            let n = norm(&cand);
            steps += 1;
            if n < best_norm {
                k += dir;
                best = cand;
                best_norm = n;
            } else {
                break;
            }
        }
        if k != start {
            break;
        }
    }
    let Some(eta_k) = best else {
        return Err(Error::LineSearch("the non-linear predictor is not finite at any candidate step".into()));
    };

    let beta = gamma.powi(k);
    let s = gamma.powi(-2 * k);
    let c: Vec<f64> = eta_k.iter().zip(eta_bar0).zip(&a).map(|((e, b0), ai)| e - (b0 + beta * ai)).collect();
    let (mut saa, mut sac, mut scc) = (0.0, 0.0, 0.0);
    for ((ai, ci), w) in a.iter().zip(&c).zip(sigma2) {
        saa += ai * ai / w;
        sac += ai * ci / w;
        scc += ci * ci / w;
    }
    let quartic = |al: f64| {
        let (p, q) = (al - 1.0, s * al * al);
        p * p * saa + 2.0 * p * q * sac + q * q * scc
    };
    let (lo, hi) = (gamma.powi(k - 1), gamma.powi(k + 1));
    let mut cands = vec![1.0f64.clamp(lo, hi), lo, hi];
    cands.extend(
        cubic_roots(2.0 * s * s * scc, 3.0 * s * sac, saa - 2.0 * s * sac, -saa)
            .into_iter()
            .filter(|x| x.is_finite() && *x >= lo && *x <= hi),
    );
    let mut alpha = cands[0];
    let mut best_p = quartic(alpha);
    for &x in &cands[1..] {
        let p = quartic(x);
        if p < best_p || (p == best_p && (x - 1.0).abs() < (alpha - 1.0).abs()) {
            alpha = x;
            best_p = p;
        }
    }
    Ok(LineSearch { alpha, v: combine(u0, u1, alpha), k })
}
