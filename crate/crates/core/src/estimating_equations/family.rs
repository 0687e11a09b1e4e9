use serde::{Deserialize, Serialize};

use crate::error::{ElcicError, Result};

const LOG_LINK_LIMIT: f64 = 700.0;

/// Mean-variance family with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    GaussianIdentity,
    PoissonLog,
    BinomialLogit,
}

impl Family {
    /// Inverse link `mu = f(eta)`.
    pub fn mean(self, eta: f64) -> Result<f64> {
        match self {
            Family::GaussianIdentity => Ok(eta),
            Family::PoissonLog => {
                if eta.abs() > LOG_LINK_LIMIT {
                    Err(ElcicError::LinkOverflow { eta })
                } else {
                    Ok(eta.exp())
                }
            }
            Family::BinomialLogit => Ok(if eta >= 0.0 {
                1.0 / (1.0 + (-eta).exp())
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            }),
        }
    }

    /// `d mu / d eta` evaluated at the mean.
    pub fn mean_derivative(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::PoissonLog => mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    /// Variance function `nu(mu)`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::PoissonLog => mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    /// Quasi-likelihood contribution of one observation (unit dispersion).
    pub fn quasi_loglik(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => -0.5 * (y - mu) * (y - mu),
            Family::PoissonLog => {
                if y > 0.0 {
                    y * mu.ln() - mu
                } else {
                    -mu
                }
            }
            Family::BinomialLogit => {
                let mu = mu.clamp(1e-300, 1.0 - 1e-16);
                y * (mu / (1.0 - mu)).ln() + (1.0 - mu).ln()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian",
            Family::PoissonLog => "poisson",
            Family::BinomialLogit => "binomial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" | "identity" => Some(Family::GaussianIdentity),
            "poisson" | "log" => Some(Family::PoissonLog),
            "binomial" | "logit" | "bernoulli" => Some(Family::BinomialLogit),
            _ => None,
        }
    }
}
