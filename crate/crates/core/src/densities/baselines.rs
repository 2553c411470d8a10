//! Unimodal and Gaussian-mixture baseline attention densities.

use crate::deformed_math::AlphaParam;
use crate::densities::kernel_family::{normalize_kdeformed, KernelDeformedDensity};
use crate::densities::{BaseDensity, NaturalParam};
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

/// Gaussian pdf w.r.t. Lebesgue measure.
pub(crate) fn gaussian_pdf(t: f64, mean: f64, variance: f64) -> f64 {
    let z = t - mean;
    (-0.5 * z * z / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// The continuous-softmax attention density: a two-parameter exponential
/// family with statistics `(t, t²)`, i.e. a Gaussian with
/// `μ = -θ₁/(2θ₂)` and `σ² = -1/(2θ₂)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousSoftmaxDensity {
    theta: (f64, f64),
    mu: f64,
    sigma_sq: f64,
}

impl ContinuousSoftmaxDensity {
    pub fn theta(&self) -> (f64, f64) {
        self.theta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Density w.r.t. Lebesgue measure.
    pub fn pdf_lebesgue(&self, t: f64) -> f64 {
        gaussian_pdf(t, self.mu, self.sigma_sq)
    }

    pub fn from_moments(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let sigma_sq = sigma * sigma;
        Ok(ContinuousSoftmaxDensity {
            theta: (mu / sigma_sq, -0.5 / sigma_sq),
            mu,
            sigma_sq,
        })
    }
}

/// Completes the square on `θ₁ t + θ₂ t²`; requires `θ₂ < 0` for the
/// exponential to be normalizable.
pub fn cts_softmax_from_theta(theta: (f64, f64)) -> Result<ContinuousSoftmaxDensity> {
    let (theta1, theta2) = theta;
    if !(theta2 < 0.0) {
        return Err(Error::invalid(format!(
            "theta2 must be negative for a normalizable density, got {theta2}"
        )));
    }
    Ok(ContinuousSoftmaxDensity {
        theta,
        mu: -theta1 / (2.0 * theta2),
        sigma_sq: -1.0 / (2.0 * theta2),
    })
}

/// The continuous-sparsemax attention density: a truncated parabola,
/// realized as the α = 2 deformed density of `f̃(t) = -(t-μ)²/(2σ²)`.
/// Its support is the single interval `μ ± σ√2` clipped to the domain.
pub fn cts_sparsemax_from_moments(
    mu: f64,
    sigma: f64,
    base: &BaseDensity,
    rule: &QuadratureRule,
) -> Result<KernelDeformedDensity> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let alpha = AlphaParam::new(2.0).expect("2.0 is in range");
    normalize_kdeformed(NaturalParam::centered_quadratic(mu, sigma), alpha, base, rule)
}

/// A `K`-component Gaussian mixture density w.r.t. Lebesgue measure.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureDensity {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// Default lower bound on component variances.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

impl GaussianMixtureDensity {
    /// Validates and normalizes the component weights; variances are clamped
    /// to `floor` from below.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, floor: f64) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::invalid(format!(
                "mixture needs matching nonempty parameter vectors, got {k}/{}/{}",
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and >= 0"));
        }
        if means.iter().any(|m| !m.is_finite()) || variances.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture means and variances must be finite"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("mixture weights must not all be zero"));
        }
        Ok(GaussianMixtureDensity {
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            variances: variances.iter().map(|v| v.max(floor)).collect(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Density w.r.t. Lebesgue measure.
    pub fn pdf_lebesgue(&self, t: f64) -> f64 {
        gmm_pdf(self, t)
    }

    /// Posterior responsibilities `p(Z = k | t)` for each component.
    pub fn responsibilities(&self, t: f64) -> Vec<f64> {
        let mut r: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, &m), &v)| w * gaussian_pdf(t, m, v))
            .collect();
        let total: f64 = r.iter().sum();
        if total > 0.0 {
            for x in &mut r {
                *x /= total;
            }
        } else {
            // Point is in the far tail of every component; fall back on the
            // prior weights rather than 0/0.
            r.copy_from_slice(&self.weights);
        }
        r
    }
}

/// `Σ_k π_k N(t; μ_k, σ_k²)`.
pub fn gmm_pdf(d: &GaussianMixtureDensity, t: f64) -> f64 {
    d.weights
        .iter()
        .zip(&d.means)
        .zip(&d.variances)
        .map(|((&w, &m), &v)| w * gaussian_pdf(t, m, v))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::build_rule;

    #[test]
    fn theta_to_moments_completes_the_square() {
        let d = cts_softmax_from_theta((0.0, -0.5)).unwrap();
        assert_eq!(d.mu(), 0.0);
        assert_eq!(d.sigma_sq(), 1.0);
        let d = cts_softmax_from_theta((1.0, -0.5)).unwrap();
        assert_eq!(d.mu(), 1.0);
        assert_eq!(d.sigma_sq(), 1.0);
    }

    #[test]
    fn nonnegative_theta2_is_rejected() {
        assert!(cts_softmax_from_theta((0.0, 0.1)).is_err());
        assert!(cts_softmax_from_theta((0.0, 0.0)).is_err());
    }

    #[test]
    fn moments_round_trip_through_theta() {
        let d = ContinuousSoftmaxDensity::from_moments(0.3, 0.05).unwrap();
        let d2 = cts_softmax_from_theta(d.theta()).unwrap();
        assert!((d2.mu() - 0.3).abs() < 1e-12);
        assert!((d2.sigma_sq() - 0.0025).abs() < 1e-14);
    }

    #[test]
    fn sparsemax_support_is_centered_and_symmetric() {
        let base = BaseDensity::uniform(0.0, 1.0).unwrap();
        let rule = build_rule(&base, 16, 8).unwrap();
        let d = cts_sparsemax_from_moments(0.5, 0.05, &base, &rule).unwrap();
        let intervals = d.support().intervals();
        assert_eq!(intervals.len(), 1);
        let (a, b) = intervals[0];
        // Support is μ ± σ√2.
        let radius = 0.05 * 2.0f64.sqrt();
        assert!(((a + b) / 2.0 - 0.5).abs() < 1e-9, "center {}", (a + b) / 2.0);
        assert!((b - a - 2.0 * radius).abs() < 1e-9, "width {}", b - a);
        assert!(b - a < 1.0);
        // Apex of the parabola is the max over the grid.
        let apex = d.pdf_q(0.5);
        for &t in d.rule().nodes() {
            assert!(d.pdf_q(t) <= apex + 1e-12);
        }
        // E[T] = μ by symmetry (support well inside the domain).
        let mean = d.rule().sum_with(&|t| t * d.pdf_q(t)).unwrap();
        assert!((mean - 0.5).abs() < 1e-8, "mean {mean}");
    }

    #[test]
    fn single_component_mixture_is_a_gaussian() {
        let d = GaussianMixtureDensity::new(vec![1.0], vec![0.0], vec![1.0], 1e-6).unwrap();
        let at_mean = gmm_pdf(&d, 0.0);
        assert!((at_mean - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_component_mixture() {
        let d = GaussianMixtureDensity::new(
            vec![0.5, 0.5],
            vec![-1.0, 1.0],
            vec![0.01, 0.01],
            1e-6,
        )
        .unwrap();
        assert!(gmm_pdf(&d, 0.0) < gmm_pdf(&d, 1.0));
        assert!((gmm_pdf(&d, -1.0) - gmm_pdf(&d, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn mixture_integrates_to_one() {
        let d = GaussianMixtureDensity::new(
            vec![0.3, 0.7],
            vec![0.3, 0.7],
            vec![0.004, 0.009],
            1e-6,
        )
        .unwrap();
        // Integrate densely over a window that contains all mass.
        let base = BaseDensity::uniform(-1.0, 2.0).unwrap();
        let rule = build_rule(&base, 64, 10).unwrap();
        let mass = rule.sum_with(&|t| gmm_pdf(&d, t) * 3.0).unwrap();
        assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn mixture_weights_are_normalized_and_variances_floored() {
        let d = GaussianMixtureDensity::new(vec![2.0, 6.0], vec![0.0, 1.0], vec![0.0, 1.0], 1e-6)
            .unwrap();
        assert!((d.weights()[0] - 0.25).abs() < 1e-15);
        assert!((d.weights()[1] - 0.75).abs() < 1e-15);
        assert_eq!(d.variances()[0], 1e-6);
    }
}
