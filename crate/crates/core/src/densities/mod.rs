//! The five attention-density families behind one tagged union.
//!
//! Kernel families are stored as densities w.r.t. the base measure `Q`
//! (their normalizers are quadrature integrals against `Q`); the Gaussian
//! and mixture baselines are stored w.r.t. Lebesgue measure, with conversion
//! through `q0` handled here so callers see one `pdf_q`/`pdf_lebesgue` pair
//! for every family.

mod base;
mod baselines;
mod kernel_family;
mod natural;

pub use base::{BaseDensity, GAUSSIAN_TRUNCATION_SIGMAS};
pub use baselines::{
    cts_softmax_from_theta, cts_sparsemax_from_moments, gmm_pdf, ContinuousSoftmaxDensity,
    GaussianMixtureDensity, DEFAULT_VARIANCE_FLOOR,
};
pub use kernel_family::{
    normalize_kdeformed, normalize_kexp, verify_lemma1, KernelDeformedDensity, KernelExpDensity,
};
pub use natural::NaturalParam;

/// A truncated parabola is the α = 2 deformed density of a quadratic.
pub type TruncatedParabolaDensity = KernelDeformedDensity;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadratureRule, SupportSet};

/// Which dominating measure a density value is reported against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Q,
    Lebesgue,
}

/// Tagged union over the five attention-density families.
#[derive(Clone, Debug)]
pub enum AttentionDensity {
    KernelExponential(KernelExpDensity),
    KernelDeformed(KernelDeformedDensity),
    ContinuousSoftmax {
        gaussian: ContinuousSoftmaxDensity,
        base: BaseDensity,
    },
    ContinuousSparsemax(TruncatedParabolaDensity),
    GaussianMixture {
        mixture: GaussianMixtureDensity,
        base: BaseDensity,
    },
}

impl AttentionDensity {
    pub fn base(&self) -> &BaseDensity {
        match self {
            AttentionDensity::KernelExponential(d) => d.base(),
            AttentionDensity::KernelDeformed(d) => d.base(),
            AttentionDensity::ContinuousSoftmax { base, .. } => base,
            AttentionDensity::ContinuousSparsemax(d) => d.base(),
            AttentionDensity::GaussianMixture { base, .. } => base,
        }
    }

    /// Support set for the sparse families; `None` means dense support.
    pub fn support(&self) -> Option<&SupportSet> {
        match self {
            AttentionDensity::KernelDeformed(d) | AttentionDensity::ContinuousSparsemax(d) => {
                Some(d.support())
            }
            _ => None,
        }
    }

    /// The support-aware rule the density was normalized on, when it has one.
    pub fn stored_rule(&self) -> Option<&QuadratureRule> {
        match self {
            AttentionDensity::KernelExponential(d) => Some(d.rule()),
            AttentionDensity::KernelDeformed(d) | AttentionDensity::ContinuousSparsemax(d) => {
                Some(d.rule())
            }
            _ => None,
        }
    }

    /// Density w.r.t. Q, without the domain check.
    pub fn pdf_q(&self, t: f64) -> f64 {
        match self {
            AttentionDensity::KernelExponential(d) => d.pdf_q(t),
            AttentionDensity::KernelDeformed(d) | AttentionDensity::ContinuousSparsemax(d) => {
                d.pdf_q(t)
            }
            AttentionDensity::ContinuousSoftmax { gaussian, base } => {
                let q0 = base.q0(t);
                if q0 > 0.0 {
                    gaussian.pdf_lebesgue(t) / q0
                } else {
                    0.0
                }
            }
            AttentionDensity::GaussianMixture { mixture, base } => {
                let q0 = base.q0(t);
                if q0 > 0.0 {
                    mixture.pdf_lebesgue(t) / q0
                } else {
                    0.0
                }
            }
        }
    }

    /// Density w.r.t. Lebesgue measure, without the domain check.
    pub fn pdf_lebesgue(&self, t: f64) -> f64 {
        match self {
            AttentionDensity::KernelExponential(d) => d.pdf_q(t) * d.base().q0(t),
            AttentionDensity::KernelDeformed(d) | AttentionDensity::ContinuousSparsemax(d) => {
                d.pdf_q(t) * d.base().q0(t)
            }
            AttentionDensity::ContinuousSoftmax { gaussian, .. } => gaussian.pdf_lebesgue(t),
            AttentionDensity::GaussianMixture { mixture, .. } => mixture.pdf_lebesgue(t),
        }
    }

    /// Short family tag used in exports and reports.
    pub fn family_name(&self) -> &'static str {
        match self {
            AttentionDensity::KernelExponential(_) => "kernel-exponential",
            AttentionDensity::KernelDeformed(_) => "kernel-deformed",
            AttentionDensity::ContinuousSoftmax { .. } => "continuous-softmax",
            AttentionDensity::ContinuousSparsemax(_) => "continuous-sparsemax",
            AttentionDensity::GaussianMixture { .. } => "gaussian-mixture",
        }
    }
}

/// Evaluates the density at `t` against the requested measure. Errors when
/// `t` lies outside the base's effective domain.
pub fn density_eval(d: &AttentionDensity, t: f64, wrt: Wrt) -> Result<f64> {
    let (lo, hi) = d.base().domain();
    if !(t >= lo && t <= hi) {
        return Err(Error::invalid(format!(
            "t = {t} outside the density domain [{lo}, {hi}]"
        )));
    }
    Ok(match wrt {
        Wrt::Q => d.pdf_q(t),
        Wrt::Lebesgue => d.pdf_lebesgue(t),
    })
}

/// `E_p[g] = ∫ g(t) p(t) dQ` by adaptive quadrature. For sparse densities the
/// given rule is split at the support boundaries first.
pub fn expectation<F: Fn(f64) -> f64>(
    d: &AttentionDensity,
    g: F,
    rule: &QuadratureRule,
) -> Result<f64> {
    let split;
    let effective = match d.support() {
        Some(support) => {
            split = rule.with_breakpoints(&support.interior_breakpoints(rule.domain()))?;
            &split
        }
        None => rule,
    };
    let integral = integrate(|t| g(t) * d.pdf_q(t), effective)?;
    Ok(integral.value)
}
