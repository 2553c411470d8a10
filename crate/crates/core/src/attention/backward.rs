//! Hand-derived adjoints for the attention forward pass.
//!
//! With `c_h = B m_h` and `m_h[n] = Σ_j w_j ψ_n(t_j) p(t_j)`, the chain rule
//! needs `∂m_h/∂θ` for each density parametrization. The quadrature rule is
//! treated as fixed (differentiate-the-discretization); support-boundary
//! motion contributes nothing because the deformed integrand vanishes at the
//! boundary.
//!
//! * Exponential family (`p = exp(f - A)`): `∂p/∂θ = p·(d_θf - E_p[d_θf])`,
//!   so parameter gradients are covariances against the direction functions.
//! * Deformed family (`p = p̃/Z`, `p̃ = exp_{2-α}(f̃)`): `d/du exp_β(u) =
//!   exp_β(u)^β` gives `∂p̃/∂θ = p̃^{2-α}·d_θf̃` on the support, hence
//!   `∂Z/∂θ = ∫ p̃^{2-α} d_θf̃ dQ` and
//!   `∂m/∂θ = (1/Z)∫ Ψ p̃^{2-α} d_θf̃ dQ - m·(∂Z/∂θ)/Z`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::value_function::{BasisSet, ValueParams};

use super::{
    sigmoid, AttentionConfig, AttentionDensity, EmittedParams, ForwardCache, HeadCache, HeadParams,
};

/// Per-head emitter gradients, mirroring the [`HeadParams`] shapes.
#[derive(Clone, Debug)]
pub enum HeadGradient {
    Kernel {
        /// ∂loss/∂γ̃ for this head.
        d_gamma: DVector<f64>,
        d_w: DMatrix<f64>,
    },
    Unimodal {
        d_w_mu: DVector<f64>,
        d_w_sigma: DVector<f64>,
    },
    Mixture {
        d_w_pi: DMatrix<f64>,
        d_w_mu: DMatrix<f64>,
        d_w_sigma: DMatrix<f64>,
    },
}

/// Gradients of the loss w.r.t. every attention parameter and the input `v`.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub heads: Vec<HeadGradient>,
    pub d_b: DMatrix<f64>,
    pub d_v: DVector<f64>,
}

struct DensityAdjoint {
    /// ∂loss/∂θ_r for the head's density parameters θ.
    d_theta: DVector<f64>,
}

/// Shared piece of the family adjoints. `density_scale_j` is `p_j` for the
/// exponential family and `p̃_j^{2-α}/Z` for the deformed one; `directions`
/// holds `d_θf` columns at the nodes.
///
/// `grid_normalized` distinguishes densities whose normalizer is itself a
/// grid integral (kernel families, truncated parabola) — their derivative
/// carries the `-m·(∂Z/∂θ)/Z` term — from closed-form normalized densities
/// (Gaussian, mixtures), whose node values already move as a normalized
/// family and take the first term only.
fn chain_through_density(
    cache: &HeadCache,
    d_m: &DVector<f64>,
    density_scale: &[f64],
    directions: &DMatrix<f64>,
    grid_normalized: bool,
) -> DensityAdjoint {
    let j_count = cache.nodes.len();
    // a_j = w_j · scale_j · (Ψᵀ d_m)_j
    let psi_dm = cache.psi.transpose() * d_m; // J
    let mut a = DVector::zeros(j_count);
    let mut b = DVector::zeros(j_count);
    for j in 0..j_count {
        let ws = cache.weights[j] * density_scale[j];
        a[j] = ws * psi_dm[j];
        b[j] = ws;
    }
    // d_theta_r = Σ_j a_j D_jr - (d_m·m) Σ_j b_j D_jr
    let mut d_theta = directions.transpose() * a;
    if grid_normalized {
        let dm_dot_m = d_m.dot(&cache.m);
        d_theta -= directions.transpose() * b * dm_dot_m;
    }
    DensityAdjoint { d_theta }
}

fn kernel_head_adjoint(cache: &HeadCache, d_m: &DVector<f64>) -> Result<DensityAdjoint> {
    let directions = cache
        .kernel_at_nodes
        .as_ref()
        .ok_or_else(|| Error::invalid("kernel head cache is missing kernel sections"))?;
    match &cache.density {
        AttentionDensity::KernelExponential(_) => {
            Ok(chain_through_density(cache, d_m, &cache.p_q, directions, true))
        }
        AttentionDensity::KernelDeformed(kd) => {
            let exponent = 2.0 - kd.alpha().alpha();
            let z = kd.z();
            let scale: Vec<f64> = cache
                .p_q
                .iter()
                .map(|&p| {
                    if p > 0.0 {
                        (p * z).powf(exponent) / z
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok(chain_through_density(cache, d_m, &scale, directions, true))
        }
        _ => Err(Error::invalid("kernel head cache holds a non-kernel density")),
    }
}

fn unimodal_directions(nodes: &[f64], mu: f64, sigma: f64, sparse: bool) -> DMatrix<f64> {
    // Columns: d_μ and d_σ of the natural parameter.
    // Dense Gaussian:   ∂log p/∂μ = (t-μ)/σ², ∂log p/∂σ = (t-μ)²/σ³ - 1/σ.
    // Parabola (α = 2): ∂f̃/∂μ = (t-μ)/σ²,   ∂f̃/∂σ = (t-μ)²/σ³.
    DMatrix::from_fn(nodes.len(), 2, |j, col| {
        let d = nodes[j] - mu;
        if col == 0 {
            d / (sigma * sigma)
        } else if sparse {
            d * d / (sigma * sigma * sigma)
        } else {
            d * d / (sigma * sigma * sigma) - 1.0 / sigma
        }
    })
}

fn unimodal_head_adjoint(cache: &HeadCache, d_m: &DVector<f64>) -> Result<DensityAdjoint> {
    let EmittedParams::Unimodal { mu, sigma, .. } = cache.emitted else {
        return Err(Error::invalid("unimodal head cache without unimodal parameters"));
    };
    match &cache.density {
        AttentionDensity::ContinuousSoftmax { .. } => {
            let directions = unimodal_directions(&cache.nodes, mu, sigma, false);
            Ok(chain_through_density(cache, d_m, &cache.p_q, &directions, false))
        }
        AttentionDensity::ContinuousSparsemax(kd) => {
            let directions = unimodal_directions(&cache.nodes, mu, sigma, true);
            let z = kd.z();
            // α = 2: p̃^{2-α} is the support indicator.
            let scale: Vec<f64> = cache
                .p_q
                .iter()
                .map(|&p| if p > 0.0 { 1.0 / z } else { 0.0 })
                .collect();
            Ok(chain_through_density(cache, d_m, &scale, &directions, true))
        }
        _ => Err(Error::invalid("unimodal head cache holds an unexpected density")),
    }
}

/// Mixture adjoint: gradients w.r.t. (π_k, μ_k, σ_k), stacked in that order.
fn mixture_head_adjoint(
    cache: &HeadCache,
    d_m: &DVector<f64>,
    config: &AttentionConfig,
) -> Result<DensityAdjoint> {
    let EmittedParams::Mixture { pis, means, sigmas, .. } = &cache.emitted else {
        return Err(Error::invalid("mixture head cache without mixture parameters"));
    };
    let AttentionDensity::GaussianMixture { base, .. } = &cache.density else {
        return Err(Error::invalid("mixture head cache holds a non-mixture density"));
    };
    let k = config.mixture_components;
    let j_count = cache.nodes.len();
    let psi_dm = cache.psi.transpose() * d_m;
    let mut d_theta = DVector::zeros(3 * k);
    for j in 0..j_count {
        let t = cache.nodes[j];
        let q0 = base.q0(t);
        if q0 <= 0.0 {
            continue;
        }
        let coeff = cache.weights[j] * psi_dm[j] / q0;
        for comp in 0..k {
            let mu = means[comp];
            let sigma = sigmas[comp];
            let var = sigma * sigma;
            let d = t - mu;
            let n = (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            d_theta[comp] += coeff * n;
            d_theta[k + comp] += coeff * pis[comp] * n * d / var;
            d_theta[2 * k + comp] += coeff * pis[comp] * n * (d * d / (var * sigma) - 1.0 / sigma);
        }
    }
    Ok(DensityAdjoint { d_theta })
}

/// Chain-rule pass from an upstream context gradient down to every head
/// emitter, the value matrix `B` and the input representation `v`.
pub fn backward(
    heads: &[HeadParams],
    value_params: &ValueParams,
    _basis: &BasisSet,
    config: &AttentionConfig,
    upstream: &DVector<f64>,
    cache: &ForwardCache,
) -> Result<GradientBundle> {
    let obs_dims = value_params.obs_dims();
    if upstream.len() != heads.len() * obs_dims {
        return Err(Error::invalid(format!(
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            heads.len() * obs_dims
        )));
    }
    if cache.heads.len() != heads.len() {
        return Err(Error::invalid("forward cache does not match the head list"));
    }

    let v = &cache.v;
    let mut d_b = DMatrix::zeros(obs_dims, value_params.basis_len());
    let mut d_v = DVector::zeros(v.len());
    let mut head_grads = Vec::with_capacity(heads.len());

    for (h, (params, head_cache)) in heads.iter().zip(&cache.heads).enumerate() {
        let u_h = DVector::from_iterator(
            obs_dims,
            (0..obs_dims).map(|i| upstream[h * obs_dims + i]),
        );
        // c_h = B m_h.
        d_b += &u_h * head_cache.m.transpose();
        let d_m = value_params.matrix().transpose() * &u_h;

        match params {
            HeadParams::Kernel { w } => {
                let adj = kernel_head_adjoint(head_cache, &d_m)?;
                let d_gamma = adj.d_theta;
                let d_w = &d_gamma * v.transpose();
                d_v += w.transpose() * &d_gamma;
                head_grads.push(HeadGradient::Kernel { d_gamma, d_w });
            }
            HeadParams::Unimodal { w_mu, w_sigma } => {
                let adj = unimodal_head_adjoint(head_cache, &d_m)?;
                let EmittedParams::Unimodal { pre_sigma, sigma_floored, .. } = head_cache.emitted
                else {
                    unreachable!("checked in unimodal_head_adjoint");
                };
                let d_mu = adj.d_theta[0];
                let d_sigma = adj.d_theta[1];
                // σ = max(softplus(z), floor): zero slope on the floor.
                let d_pre = if sigma_floored { 0.0 } else { d_sigma * sigmoid(pre_sigma) };
                d_v += w_mu * d_mu + w_sigma * d_pre;
                head_grads.push(HeadGradient::Unimodal {
                    d_w_mu: v * d_mu,
                    d_w_sigma: v * d_pre,
                });
            }
            HeadParams::Mixture { w_pi, w_mu, w_sigma } => {
                let adj = mixture_head_adjoint(head_cache, &d_m, config)?;
                let EmittedParams::Mixture { pis, pre_sigmas, floored, .. } = &head_cache.emitted
                else {
                    unreachable!("checked in mixture_head_adjoint");
                };
                let k = config.mixture_components;
                let d_pi = adj.d_theta.rows(0, k).into_owned();
                let d_means = adj.d_theta.rows(k, k).into_owned();
                let d_sigmas = adj.d_theta.rows(2 * k, k).into_owned();
                // Softmax backward: d_a = diag(π) d_π - π (πᵀ d_π).
                let pi_dot = pis.dot(&d_pi);
                let d_logits =
                    DVector::from_fn(k, |i, _| pis[i] * (d_pi[i] - pi_dot));
                let d_pre = DVector::from_fn(k, |i, _| {
                    if floored[i] {
                        0.0
                    } else {
                        d_sigmas[i] * sigmoid(pre_sigmas[i])
                    }
                });
                d_v += w_pi.transpose() * &d_logits
                    + w_mu.transpose() * &d_means
                    + w_sigma.transpose() * &d_pre;
                head_grads.push(HeadGradient::Mixture {
                    d_w_pi: &d_logits * v.transpose(),
                    d_w_mu: &d_means * v.transpose(),
                    d_w_sigma: &d_pre * v.transpose(),
                });
            }
        }
    }

    if d_v.iter().any(|x| !x.is_finite()) || d_b.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("backward pass produced non-finite gradients"));
    }
    Ok(GradientBundle {
        heads: head_grads,
        d_b,
        d_v,
    })
}

impl GradientBundle {
    /// Elementwise accumulation; shapes must match.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        self.d_b += &other.d_b;
        self.d_v += &other.d_v;
        for (mine, theirs) in self.heads.iter_mut().zip(&other.heads) {
            match (mine, theirs) {
                (
                    HeadGradient::Kernel { d_gamma, d_w },
                    HeadGradient::Kernel { d_gamma: og, d_w: ow },
                ) => {
                    *d_gamma += og;
                    *d_w += ow;
                }
                (
                    HeadGradient::Unimodal { d_w_mu, d_w_sigma },
                    HeadGradient::Unimodal { d_w_mu: om, d_w_sigma: os },
                ) => {
                    *d_w_mu += om;
                    *d_w_sigma += os;
                }
                (
                    HeadGradient::Mixture { d_w_pi, d_w_mu, d_w_sigma },
                    HeadGradient::Mixture { d_w_pi: op, d_w_mu: om, d_w_sigma: os },
                ) => {
                    *d_w_pi += op;
                    *d_w_mu += om;
                    *d_w_sigma += os;
                }
                _ => panic!("gradient bundles have mismatched head kinds"),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_b *= factor;
        self.d_v *= factor;
        for head in &mut self.heads {
            match head {
                HeadGradient::Kernel { d_gamma, d_w } => {
                    *d_gamma *= factor;
                    *d_w *= factor;
                }
                HeadGradient::Unimodal { d_w_mu, d_w_sigma } => {
                    *d_w_mu *= factor;
                    *d_w_sigma *= factor;
                }
                HeadGradient::Mixture { d_w_pi, d_w_mu, d_w_sigma } => {
                    *d_w_pi *= factor;
                    *d_w_mu *= factor;
                    *d_w_sigma *= factor;
                }
            }
        }
    }
}

