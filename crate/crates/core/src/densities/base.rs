//! Base measures `Q` that attention densities are defined against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of standard deviations a Gaussian base is truncated at. The mass
/// outside `±8σ` is below 1e-15, so truncation keeps integrals finite-domain
/// without a measurable normalization error.
pub const GAUSSIAN_TRUNCATION_SIGMAS: f64 = 8.0;

/// The reference measure `Q` with Lebesgue density `q0`.
///
/// All attention densities in this crate are densities *with respect to* a
/// `BaseDensity`: quadrature weights fold `q0` in, so a plain weighted sum of
/// integrand values approximates `∫ f dQ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDensity {
    Gaussian { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl BaseDensity {
    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "Gaussian base requires finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(BaseDensity::Gaussian { mu, sigma })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "Uniform base requires finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(BaseDensity::Uniform { lo, hi })
    }

    /// Lebesgue density `q0(t) = dQ/dt`.
    pub fn q0(&self, t: f64) -> f64 {
        match *self {
            BaseDensity::Gaussian { mu, sigma } => {
                let z = (t - mu) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            BaseDensity::Uniform { lo, hi } => {
                if t >= lo && t <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    /// Effective integration domain: the natural `[lo, hi]` for a uniform
    /// base, `mu ± 8σ` for a Gaussian one.
    pub fn domain(&self) -> (f64, f64) {
        match *self {
            BaseDensity::Gaussian { mu, sigma } => (
                mu - GAUSSIAN_TRUNCATION_SIGMAS * sigma,
                mu + GAUSSIAN_TRUNCATION_SIGMAS * sigma,
            ),
            BaseDensity::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn domain_length(&self) -> f64 {
        let (lo, hi) = self.domain();
        hi - lo
    }

    /// Re-validates fields, for instances that arrived via deserialization.
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseDensity::Gaussian { mu, sigma } => BaseDensity::gaussian(mu, sigma).map(|_| ()),
            BaseDensity::Uniform { lo, hi } => BaseDensity::uniform(lo, hi).map(|_| ()),
        }
    }
}
