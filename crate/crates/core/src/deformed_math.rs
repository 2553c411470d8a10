//! Deformed-exponential scalar algebra, Tsallis negentropy and the induced
//! Bregman divergence.
//!
//! The β-exponential `exp_β(x) = [1 + (1-β)x]₊^{1/(1-β)}` generalizes `exp`
//! (recovered at β = 1) and can return exact zeros for β < 1, which is what
//! gives deformed exponential family densities sparse support. Throughout the
//! crate the entropic index α lies in (1, 2] and β = 2 - α in [0, 1); α = 2
//! (β = 0) is the sparsemax case.

use crate::error::{Error, Result};
use crate::quadrature::{pairwise_sum, QuadratureRule};

/// Entropic index α with the sparse range `1 < α ≤ 2` enforced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaParam {
    alpha: f64,
}

impl AlphaParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (1, 2], got {alpha}"
            )));
        }
        Ok(AlphaParam { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The deformation index β = 2 - α in [0, 1).
    pub fn beta(&self) -> f64 {
        2.0 - self.alpha
    }
}

/// `exp_β(x)`: `[1 + (1-β)x]₊^{1/(1-β)}` for β < 1, `exp(x)` at β = 1.
///
/// The clamp is an explicit comparison, so the result is literal zero (not an
/// underflow residue) whenever `1 + (1-β)x ≤ 0`. Total on all finite inputs.
pub fn beta_exp(x: f64, beta: f64) -> f64 {
    if beta >= 1.0 {
        return x.exp();
    }
    let one_minus_beta = 1.0 - beta;
    let inner = 1.0 + one_minus_beta * x;
    if inner <= 0.0 {
        0.0
    } else {
        inner.powf(1.0 / one_minus_beta)
    }
}

/// `log_β(x)`: `(x^{1-β} - 1)/(1-β)` for β ≠ 1, `ln x` at β = 1.
///
/// Undefined for `x ≤ 0`.
pub fn beta_log(x: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::invalid(format!("beta_log undefined for x <= 0, got {x}")));
    }
    if beta == 1.0 {
        Ok(x.ln())
    } else {
        let one_minus_beta = 1.0 - beta;
        Ok((x.powf(one_minus_beta) - 1.0) / one_minus_beta)
    }
}

/// A density w.r.t. the rule's base measure, tabulated at quadrature nodes.
#[derive(Clone, Debug)]
pub struct GridDensity {
    rule: QuadratureRule,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn from_fn<F: Fn(f64) -> f64>(rule: &QuadratureRule, f: F) -> Result<Self> {
        let values: Vec<f64> = rule.nodes().iter().map(|&t| f(t)).collect();
        GridDensity::from_values(rule, values)
    }

    pub fn from_values(rule: &QuadratureRule, values: Vec<f64>) -> Result<Self> {
        if values.len() != rule.nodes().len() {
            return Err(Error::invalid(format!(
                "grid density has {} values for {} nodes",
                values.len(),
                rule.nodes().len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("grid density values must be finite and >= 0"));
        }
        Ok(GridDensity {
            rule: rule.clone(),
            values,
        })
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Quadrature-weighted total mass `Σ wⱼ p(tⱼ) ≈ ∫ p dQ`.
    pub fn mass(&self) -> f64 {
        let terms: Vec<f64> = self
            .values
            .iter()
            .zip(self.rule.weights())
            .map(|(v, w)| v * w)
            .collect();
        pairwise_sum(&terms)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.mass() - 1.0).abs() <= tol
    }

    fn same_grid(&self, other: &GridDensity) -> bool {
        self.rule.nodes() == other.rule.nodes()
    }
}

/// The α-Tsallis negentropy `Ω_α(p)`, with the Shannon limit admitted at
/// `α = 1` (where `0·log 0` is taken to be 0).
pub fn tsallis_negentropy(p: &GridDensity, alpha: f64) -> Result<f64> {
    if !(1.0..=2.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "tsallis_negentropy needs alpha in [1, 2], got {alpha}"
        )));
    }
    let weights = p.rule().weights();
    if alpha == 1.0 {
        let terms: Vec<f64> = p
            .values()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| if v > 0.0 { w * v * v.ln() } else { 0.0 })
            .collect();
        Ok(pairwise_sum(&terms))
    } else {
        let terms: Vec<f64> = p
            .values()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| w * v.powf(alpha))
            .collect();
        Ok((pairwise_sum(&terms) - 1.0) / (alpha * (alpha - 1.0)))
    }
}

/// Gradient of `Ω_α` at `p`: the grid function `t ↦ p(t)^{α-1}/(α-1)`.
pub fn negentropy_gradient(p: &GridDensity, alpha: &AlphaParam) -> GridDensity {
    let a = alpha.alpha();
    let values: Vec<f64> = p
        .values()
        .iter()
        .map(|&v| if v > 0.0 { v.powf(a - 1.0) / (a - 1.0) } else { 0.0 })
        .collect();
    GridDensity {
        rule: p.rule.clone(),
        values,
    }
}

/// Bregman divergence `B_α(p, g) = Ω_α(p) - Ω_α(g) - ⟨∇Ω_α(g), p - g⟩`.
///
/// Nonnegative by convexity of `Ω_α`; asymmetric in general (symmetric only
/// in the quadratic case α = 2).
pub fn bregman_divergence(p: &GridDensity, g: &GridDensity, alpha: &AlphaParam) -> Result<f64> {
    if !p.same_grid(g) {
        return Err(Error::invalid("bregman_divergence needs densities on the same grid"));
    }
    let a = alpha.alpha();
    let omega_p = tsallis_negentropy(p, a)?;
    let omega_g = tsallis_negentropy(g, a)?;
    let grad_g = negentropy_gradient(g, alpha);
    let terms: Vec<f64> = grad_g
        .values()
        .iter()
        .zip(p.values())
        .zip(g.values())
        .zip(p.rule().weights())
        .map(|(((&dg, &pv), &gv), &w)| w * dg * (pv - gv))
        .collect();
    Ok(omega_p - omega_g - pairwise_sum(&terms))
}
