//! Observation models: Gaussian (identity link) and Poisson (log link).

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::LN_SQRT_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
}

impl Family {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(Family::Gaussian),
            "poisson" => Some(Family::Poisson),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
        }
    }

    pub fn has_precision(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    pub fn check_response(self, y: &[f64]) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            let ok = match self {
                Family::Gaussian => v.is_finite(),
                Family::Poisson => v.is_finite() && v >= 0.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::Likelihood(format!("invalid {} response {v} at row {i}", self.name())));
            }
        }
        Ok(())
    }
}

fn check(y: &[f64], eta: &[f64]) -> Result<()> {
    if y.len() != eta.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: eta.len() });
    }
    if let Some(i) = eta.iter().position(|e| !e.is_finite()) {
        return Err(Error::Likelihood(format!("non-finite predictor {} at row {i}", eta[i])));
    }
    Ok(())
}

/// `Σ_i log p(y_i | η_i)`; `tau` is the Gaussian observation precision and
/// ignored for Poisson.
pub fn loglik(family: Family, y: &[f64], eta: &[f64], tau: f64) -> Result<f64> {
    check(y, eta)?;
    Ok(match family {
        Family::Poisson => y.iter().zip(eta).map(|(&y, &e)| y * e - e.exp() - ln_gamma(y + 1.0)).sum(),
        Family::Gaussian => {
            let c = 0.5 * tau.ln() - LN_SQRT_2PI;
            y.iter().zip(eta).map(|(&y, &e)| c - 0.5 * tau * (y - e) * (y - e)).sum()
        }
    })
}

/// Per-observation first and second derivatives of `log p(y_i | η_i)`.
pub fn grad_hess(family: Family, y: &[f64], eta: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    match family {
        Family::Poisson => {
            let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
            (y.iter().zip(&mu).map(|(y, m)| y - m).collect(), mu.iter().map(|m| -m).collect())
        }
        Family::Gaussian => (y.iter().zip(eta).map(|(y, e)| tau * (y - e)).collect(), vec![-tau; y.len()]),
    }
}

/// Draws observations given the predictor.
pub fn simulate(family: Family, eta: &[f64], tau: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    eta.iter()
        .map(|&e| match family {
            Family::Poisson => {
                let mu = e.exp();
                if mu == 0.0 {
                    return Ok(0.0);
                }
                Poisson::new(mu).map(|d| d.sample(rng)).map_err(|err| Error::Likelihood(format!("poisson mean {mu}: {err}")))
            }
            Family::Gaussian => Normal::new(e, 1.0 / tau.sqrt())
                .map(|d| d.sample(rng))
                .map_err(|err| Error::Likelihood(format!("gaussian sd: {err}"))),
        })
        .collect()
}
