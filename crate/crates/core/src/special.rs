//! Normal and gamma distribution helpers with tail-stable evaluation.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)`.
pub fn norm_log_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-norm_cdf(-x)).ln_1p()
    } else if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // asymptotic Mills-ratio series
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2;
        -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// Inverse standard normal CDF, polished by Newton steps on the tail
/// that `p` lies in.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..2 {
        let step = if p < 0.5 {
            (norm_cdf(x) - p) / norm_pdf(x)
        } else {
            ((1.0 - p) - norm_cdf(-x)) / norm_pdf(x)
        };
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

/// Log density of Gamma(shape, rate) at `x > 0`.
pub fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)
}

/// Gamma(shape, rate) CDF.
pub fn gamma_cdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, rate * x)
    }
}

/// Gamma(shape, rate) quantile at lower-tail probability `p` and
/// upper-tail probability `q = 1 - p`; whichever is smaller drives the
/// root solve so that both tails stay accurate.
pub fn gamma_quantile_pq(p: f64, q: f64, shape: f64, rate: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if q <= 0.0 {
        return f64::INFINITY;
    }
    let use_lower = p <= q;
    let target = if use_lower { p.ln() } else { q.ln() };
    // g(s) = ln P(shape, e^s) - ln p   (or the upper tail version), monotone in s
    let g = |s: f64| {
        let t = s.exp();
        let v = if use_lower { gamma_lr(shape, t) } else { gamma_ur(shape, t) };
        v.ln() - target
    };
    let dg = |s: f64| {
        let t = s.exp();
        let log_dens = (shape - 1.0) * t.ln() - t - ln_gamma(shape);
        let v = if use_lower { gamma_lr(shape, t) } else { gamma_ur(shape, t) };
        let d = (log_dens + s).exp() / v;
        if use_lower { d } else { -d }
    };
    // bracket: lower tail increases with s, upper tail decreases
    let sign = if use_lower { 1.0 } else { -1.0 };
    let mut lo = shape.ln() - 1.0;
    let mut hi = lo + 2.0;
    while sign * g(lo) > 0.0 {
        lo -= 2.0 * (1.0 + (hi - lo));
        if lo < -745.0 {
            break;
        }
    }
    while sign * g(hi) < 0.0 {
        hi += 2.0 * (1.0 + (hi - lo));
        if hi > 709.0 {
            break;
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gs = g(s);
        if !gs.is_finite() {
            s = 0.5 * (lo + hi);
            continue;
        }
        if sign * gs > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let d = dg(s);
        let mut next = s - gs / d;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() < 1e-15 * s.abs().max(1.0) {
            s = next;
            break;
        }
        s = next;
    }
    s.exp() / rate
}
