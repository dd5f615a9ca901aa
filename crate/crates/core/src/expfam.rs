//! Exponential-family responses with known scale.
//!
//! The density of a response `y` given the natural parameter `t` is
//! `exp{y t - b(t) + c(y)}`. Only families with a fixed dispersion are
//! supported: Binomial with `k` trials (logit link) and Poisson (log link).

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Binomial { trials: u32 },
    Poisson,
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_finite(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("natural parameter must be finite, got {t}")))
    }
}

impl Family {
    pub fn binomial(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(Error::Domain("binomial trials must be positive".into()));
        }
        Ok(Family::Binomial { trials })
    }

    /// Cumulant function `b(t)`.
    pub fn b(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.cumulant(t))
    }

    /// Mean response `b'(t)`.
    pub fn mean(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.mean_unchecked(t))
    }

    /// Variance `b''(t)`.
    pub fn variance(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.variance_unchecked(t))
    }

    #[inline]
    pub(crate) fn cumulant(&self, t: f64) -> f64 {
        match *self {
            Family::Binomial { trials } => trials as f64 * softplus(t),
            Family::Poisson => t.exp(),
        }
    }

    #[inline]
    pub(crate) fn mean_unchecked(&self, t: f64) -> f64 {
        match *self {
            Family::Binomial { trials } => trials as f64 * sigmoid(t),
            Family::Poisson => t.exp(),
        }
    }

    #[inline]
    pub(crate) fn variance_unchecked(&self, t: f64) -> f64 {
        match *self {
            Family::Binomial { trials } => {
                let e = (-t.abs()).exp();
                trials as f64 * e / ((1.0 + e) * (1.0 + e))
            }
            Family::Poisson => t.exp(),
        }
    }

    /// `y t - b(t)`, the part of the log density that depends on `t`.
    /// Accepts any real `y`; perturbed and substituted responses use it.
    #[inline]
    pub(crate) fn loglik_kernel(&self, y: f64, t: f64) -> f64 {
        y * t - self.cumulant(t)
    }

    pub fn in_support(&self, y: f64) -> bool {
        if !(y.is_finite() && y >= 0.0 && y.fract() == 0.0) {
            return false;
        }
        match *self {
            Family::Binomial { trials } => y <= trials as f64,
            Family::Poisson => true,
        }
    }

    /// Log base-measure term `c(y)`.
    pub fn log_base(&self, y: f64) -> Result<f64> {
        if !self.in_support(y) {
            return Err(Error::Domain(format!("response {y} outside the support of {self:?}")));
        }
        Ok(match *self {
            Family::Binomial { trials } => {
                let k = trials as f64;
                ln_gamma(k + 1.0) - ln_gamma(y + 1.0) - ln_gamma(k - y + 1.0)
            }
            Family::Poisson => -ln_gamma(y + 1.0),
        })
    }

    /// Full log density `y t - b(t) + c(y)`.
    pub fn log_density(&self, y: f64, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.loglik_kernel(y, t) + self.log_base(y)?)
    }

    /// Natural parameter for a given mean response.
    pub fn link(&self, mean: f64) -> Result<f64> {
        match *self {
            Family::Binomial { trials } => {
                let p = mean / trials as f64;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Domain(format!("binomial mean {mean} outside (0, {trials})")));
                }
                Ok((p / (1.0 - p)).ln())
            }
            Family::Poisson => {
                if !(mean > 0.0) {
                    return Err(Error::Domain(format!("poisson mean {mean} must be positive")));
                }
                Ok(mean.ln())
            }
        }
    }

    /// Kullback-Leibler divergence of the fitted law at `t_hat` from the true
    /// law at `t_true`: `b'(t*)(t* - t) - b(t*) + b(t)`.
    pub fn kl(&self, t_true: f64, t_hat: f64) -> f64 {
        self.mean_unchecked(t_true) * (t_true - t_hat) - self.cumulant(t_true) + self.cumulant(t_hat)
    }

    /// Largest admissible response value, if bounded.
    pub fn max_response(&self) -> Option<f64> {
        match *self {
            Family::Binomial { trials } => Some(trials as f64),
            Family::Poisson => None,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Binomial { trials } => write!(f, "binomial:{trials}"),
            Family::Poisson => write!(f, "poisson"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "poisson" {
            return Ok(Family::Poisson);
        }
        if let Some(k) = s.strip_prefix("binomial") {
            let k = k.trim_start_matches(':');
            let trials = if k.is_empty() {
                1
            } else {
                k.parse::<u32>().map_err(|_| Error::Usage(format!("invalid binomial trials '{k}'")))?
            };
            return Family::binomial(trials);
        }
        Err(Error::Usage(format!("unknown family '{s}', expected binomial:k or poisson")))
    }
}
