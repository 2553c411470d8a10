//! Multi-head continuous attention.
//!
//! Each head maps an input representation `v` to the parameters of an
//! attention density, and the head's context is `c_h = E_{p_h}[V(T)]` with
//! the shared value function `V(t) = B Ψ(t)`. Because
//! `E_p[V(T)] = B E_p[Ψ(T)]`, the forward pass reduces to the basis-moment
//! vector `m_h = E_{p_h}[Ψ(T)]`, one quadrature sweep per head.
//!
//! The backward pass is a set of hand-derived adjoints (no autodiff): the
//! exponential family differentiates through its log-normalizer as a
//! covariance, and the deformed family through the escort expectation
//! `∫ p^{2-α} g dQ / ∫ p^{2-α} dQ`. The quadrature rule (nodes, weights and
//! support-split panels) is treated as fixed during differentiation;
//! [`fd_gradcheck`] validates every parametrization against central finite
//! differences and skips probes whose finite-difference step would change a
//! sparse density's support set.

mod backward;
mod gradcheck;

pub use backward::{backward, GradientBundle, HeadGradient};
pub use gradcheck::{fd_gradcheck, GradCheckReport, ProbeBlock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deformed_math::{beta_exp, beta_log, AlphaParam};
use crate::densities::{
    cts_sparsemax_from_moments, normalize_kdeformed, normalize_kexp, AttentionDensity,
    BaseDensity, ContinuousSoftmaxDensity, GaussianMixtureDensity, KernelDeformedDensity,
    KernelExpDensity, NaturalParam,
};
use crate::error::{Error, Result};
use crate::quadrature::{
    find_support_with_values, half_resolution_panels, integrate, pairwise_sum, refinement_scale,
    QuadratureRule, NORMALIZER_REL_TOL,
};
use crate::rkhs::{Kernel, RkhsFunction};
use crate::value_function::{BasisSet, ValueParams};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The density family every head of a model emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityFamily {
    /// Kernel exponential family (dense support, multimodal).
    KernelSoftmax,
    /// Kernel deformed exponential family (sparse support, multimodal);
    /// α = 2 is kernel sparsemax.
    KernelDeformed,
    /// Unimodal Gaussian baseline.
    CtsSoftmax,
    /// Unimodal truncated-parabola baseline.
    CtsSparsemax,
    /// Gaussian mixture head with network-emitted parameters.
    GaussianMixture,
}

impl DensityFamily {
    pub fn is_kernel(self) -> bool {
        matches!(self, DensityFamily::KernelSoftmax | DensityFamily::KernelDeformed)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, DensityFamily::KernelDeformed | DensityFamily::CtsSparsemax)
    }
}

/// Shared static configuration for an attention block.
#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub family: DensityFamily,
    pub alpha: AlphaParam,
    pub inducing_points: Vec<f64>,
    pub kernel: Kernel,
    pub base: BaseDensity,
    pub rule: QuadratureRule,
    pub mixture_components: usize,
    pub variance_floor: f64,
}

impl AttentionConfig {
    /// Smallest σ a unimodal or mixture head may emit: two average node
    /// spacings, so the quadrature grid always resolves the density.
    pub fn sigma_floor(&self) -> f64 {
        let (lo, hi) = self.rule.domain();
        2.0 * (hi - lo) / self.rule.nodes().len() as f64
    }
}

/// Learnable per-head parameters: an emitter from `v` to density parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "emitter", rename_all = "snake_case")]
pub enum HeadParams {
    /// `γ̃ = W v` for the kernel families; `W` is `I × |v|`.
    Kernel { w: DMatrix<f64> },
    /// `μ = w_mu·v`, `σ = softplus(w_sigma·v)` for the unimodal baselines.
    Unimodal {
        w_mu: DVector<f64>,
        w_sigma: DVector<f64>,
    },
    /// Mixture parameters: `π = softmax(W_pi v)`, means `W_mu v`,
    /// `σ_k = softplus((W_sigma v)_k)`.
    Mixture {
        w_pi: DMatrix<f64>,
        w_mu: DMatrix<f64>,
        w_sigma: DMatrix<f64>,
    },
}

/// The concatenated per-head contexts `c = (c_1, …, c_H)`, each in `R^O`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector {
    values: DVector<f64>,
    heads: usize,
    obs_dims: usize,
}

impl ContextVector {
    pub fn from_parts(values: DVector<f64>, heads: usize, obs_dims: usize) -> Self {
        debug_assert_eq!(values.len(), heads * obs_dims);
        ContextVector {
            values,
            heads,
            obs_dims,
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn obs_dims(&self) -> usize {
        self.obs_dims
    }

    pub fn head(&self, h: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.obs_dims,
            (0..self.obs_dims).map(|i| self.values[h * self.obs_dims + i]),
        )
    }
}

/// Family-specific intermediates retained for the backward pass.
#[derive(Clone, Debug)]
pub enum EmittedParams {
    Kernel {
        gamma: DVector<f64>,
    },
    Unimodal {
        mu: f64,
        sigma: f64,
        pre_sigma: f64,
        sigma_floored: bool,
    },
    Mixture {
        pis: DVector<f64>,
        means: DVector<f64>,
        pre_sigmas: DVector<f64>,
        sigmas: DVector<f64>,
        floored: Vec<bool>,
    },
}

/// Everything the backward pass needs about one head's forward evaluation.
#[derive(Clone, Debug)]
pub struct HeadCache {
    pub density: AttentionDensity,
    pub weights: Vec<f64>,
    pub nodes: Vec<f64>,
    /// Density w.r.t. Q at the nodes.
    pub p_q: Vec<f64>,
    /// `N × J` basis values at the nodes.
    pub psi: DMatrix<f64>,
    /// `J × I` kernel sections at the nodes, for kernel heads.
    pub kernel_at_nodes: Option<DMatrix<f64>>,
    pub emitted: EmittedParams,
    pub m: DVector<f64>,
}

/// Forward-pass cache for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub v: DVector<f64>,
    pub heads: Vec<HeadCache>,
}

/// Precomputed node matrices for the unsplit configuration rule (and its
/// half-resolution error-check companion), reused across heads and inputs
/// whenever a density ends up on exactly those nodes. This is what makes the
/// training loop cheap: kernel-family normalizers reduce to matrix-vector
/// products against these fixed matrices.
#[derive(Clone, Debug)]
pub struct SharedNodeMatrices {
    nodes: Vec<f64>,
    psi: DMatrix<f64>,
    kernel_at_nodes: DMatrix<f64>,
    half_rule: QuadratureRule,
    kernel_at_half: DMatrix<f64>,
}

impl SharedNodeMatrices {
    pub fn new(config: &AttentionConfig, basis: &BasisSet) -> Result<Self> {
        let nodes = config.rule.nodes().to_vec();
        let half_rule = config
            .rule
            .with_panels(half_resolution_panels(config.rule.panel_count()))?;
        Ok(SharedNodeMatrices {
            psi: basis_at_nodes(basis, &nodes),
            kernel_at_nodes: kernel_at_nodes(&config.kernel, &config.inducing_points, &nodes),
            kernel_at_half: kernel_at_nodes(&config.kernel, &config.inducing_points, half_rule.nodes()),
            half_rule,
            nodes,
        })
    }
}

fn basis_at_nodes(basis: &BasisSet, nodes: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(basis.len(), nodes.len(), |n, j| basis.eval_one(n, nodes[j]))
}

fn kernel_at_nodes(kernel: &Kernel, inducing: &[f64], nodes: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), inducing.len(), |j, i| {
        kernel.evaluate(nodes[j], inducing[i])
    })
}

/// Emits the density parameters for one head and normalizes the density.
pub fn head_density(
    v: &DVector<f64>,
    params: &HeadParams,
    config: &AttentionConfig,
) -> Result<AttentionDensity> {
    Ok(emit_head(v, params, config)?.0)
}

/// As [`head_density`], also returning the emitted intermediates.
fn emit_head(
    v: &DVector<f64>,
    params: &HeadParams,
    config: &AttentionConfig,
) -> Result<(AttentionDensity, EmittedParams)> {
    match (params, config.family) {
        (HeadParams::Kernel { w }, DensityFamily::KernelSoftmax) => {
            let gamma = w * v;
            let f = RkhsFunction::new(
                gamma.iter().copied().collect(),
                config.inducing_points.clone(),
                config.kernel.clone(),
            )?;
            let d = normalize_kexp(NaturalParam::rkhs(f), &config.base, &config.rule)?;
            Ok((
                AttentionDensity::KernelExponential(d),
                EmittedParams::Kernel { gamma },
            ))
        }
        (HeadParams::Kernel { w }, DensityFamily::KernelDeformed) => {
            let gamma = w * v;
            let f = RkhsFunction::new(
                gamma.iter().copied().collect(),
                config.inducing_points.clone(),
                config.kernel.clone(),
            )?;
            let d = normalize_kdeformed(
                NaturalParam::rkhs(f),
                config.alpha,
                &config.base,
                &config.rule,
            )?;
            Ok((
                AttentionDensity::KernelDeformed(d),
                EmittedParams::Kernel { gamma },
            ))
        }
        (
            HeadParams::Unimodal { w_mu, w_sigma },
            DensityFamily::CtsSoftmax | DensityFamily::CtsSparsemax,
        ) => {
            let mu = w_mu.dot(v);
            let pre_sigma = w_sigma.dot(v);
            let raw_sigma = softplus(pre_sigma);
            let floor = config.sigma_floor();
            let sigma_floored = raw_sigma < floor;
            let sigma = raw_sigma.max(floor);
            let emitted = EmittedParams::Unimodal {
                mu,
                sigma,
                pre_sigma,
                sigma_floored,
            };
            let density = if config.family == DensityFamily::CtsSoftmax {
                AttentionDensity::ContinuousSoftmax {
                    gaussian: ContinuousSoftmaxDensity::from_moments(mu, sigma)?,
                    base: config.base.clone(),
                }
            } else {
                AttentionDensity::ContinuousSparsemax(cts_sparsemax_from_moments(
                    mu,
                    sigma,
                    &config.base,
                    &config.rule,
                )?)
            };
            Ok((density, emitted))
        }
        (
            HeadParams::Mixture { w_pi, w_mu, w_sigma },
            DensityFamily::GaussianMixture,
        ) => {
            let logits = w_pi * v;
            let max = logits.max();
            let exps: DVector<f64> = logits.map(|a| (a - max).exp());
            let pis = &exps / exps.sum();
            let means = w_mu * v;
            let pre_sigmas = w_sigma * v;
            let floor = config.sigma_floor();
            let floored: Vec<bool> = pre_sigmas.iter().map(|&z| softplus(z) < floor).collect();
            let sigmas: DVector<f64> = pre_sigmas.map(|z| softplus(z).max(floor));
            let mixture = GaussianMixtureDensity::new(
                pis.iter().copied().collect(),
                means.iter().copied().collect(),
                sigmas.iter().map(|s| s * s).collect(),
                config.variance_floor,
            )?;
            let emitted = EmittedParams::Mixture {
                pis: pis.clone(),
                means: means.clone(),
                pre_sigmas,
                sigmas,
                floored,
            };
            Ok((
                AttentionDensity::GaussianMixture {
                    mixture,
                    base: config.base.clone(),
                },
                emitted,
            ))
        }
        _ => Err(Error::invalid(format!(
            "head parameter shape does not match density family {:?}",
            config.family
        ))),
    }
}

/// `m = E_p[Ψ(T)]` on the density's own support-aware quadrature rule.
pub fn basis_expectation(density: &AttentionDensity, basis: &BasisSet, rule: &QuadratureRule) -> DVector<f64> {
    let effective = density.stored_rule().unwrap_or(rule);
    let nodes = effective.nodes();
    let weights = effective.weights();
    let mut m = DVector::zeros(basis.len());
    for (&t, &w) in nodes.iter().zip(weights) {
        let wp = w * density.pdf_q(t);
        if wp == 0.0 {
            continue;
        }
        for n in 0..basis.len() {
            m[n] += wp * basis.eval_one(n, t);
        }
    }
    m
}

/// Kernel-family hot path: the natural parameter at the shared rule's nodes
/// is a matrix-vector product, the normalizer a weighted sum, and the
/// half-resolution error estimate reuses a second cached kernel matrix.
/// Returns `None` when the error target is missed or the support needs panel
/// splits — callers then take the general normalizing path.
fn fast_kernel_head(
    v: &DVector<f64>,
    w: &DMatrix<f64>,
    config: &AttentionConfig,
    shared: &SharedNodeMatrices,
) -> Result<Option<(AttentionDensity, EmittedParams, Vec<f64>)>> {
    let gamma = w * v;
    let f_full = &shared.kernel_at_nodes * &gamma;
    let f_half = &shared.kernel_at_half * &gamma;
    let rkhs = RkhsFunction::new(
        gamma.iter().copied().collect(),
        config.inducing_points.clone(),
        config.kernel.clone(),
    )?;
    let weighted = |values: &[f64], rule: &QuadratureRule| -> f64 {
        let terms: Vec<f64> = values
            .iter()
            .zip(rule.weights())
            .map(|(&p, &w)| p * w)
            .collect();
        pairwise_sum(&terms)
    };

    match config.family {
        DensityFamily::KernelSoftmax => {
            let f_max = f_full.max();
            if !f_max.is_finite() {
                return Err(Error::numeric("natural parameter is not finite on the grid"));
            }
            let exp_full: Vec<f64> = f_full.iter().map(|&x| (x - f_max).exp()).collect();
            let exp_half: Vec<f64> = f_half.iter().map(|&x| (x - f_max).exp()).collect();
            let z_full = weighted(&exp_full, &config.rule);
            let z_half = weighted(&exp_half, &shared.half_rule);
            if (z_full - z_half).abs() > NORMALIZER_REL_TOL * refinement_scale(z_full) {
                return Ok(None);
            }
            if !(z_full > 0.0) || !z_full.is_finite() {
                return Err(Error::numeric(format!("normalizer integral is {z_full}")));
            }
            let log_normalizer = f_max + z_full.ln();
            let density = KernelExpDensity::from_parts(
                NaturalParam::rkhs(rkhs),
                log_normalizer,
                config.base.clone(),
                config.rule.clone(),
            );
            let p_q: Vec<f64> = exp_full.iter().map(|&e| e / z_full).collect();
            Ok(Some((
                AttentionDensity::KernelExponential(density),
                EmittedParams::Kernel { gamma },
                p_q,
            )))
        }
        DensityFamily::KernelDeformed => {
            let support = find_support_with_values(
                &|t| rkhs.eval(t),
                f_full.as_slice(),
                &config.alpha,
                &config.rule,
            );
            if support.is_empty() {
                return Err(Error::degenerate(
                    "exp_{2-alpha}(f~) vanishes on the whole domain",
                ));
            }
            if !support.interior_breakpoints(config.rule.domain()).is_empty() {
                return Ok(None);
            }
            let beta = config.alpha.beta();
            let raw_full: Vec<f64> = f_full.iter().map(|&x| beta_exp(x, beta)).collect();
            let raw_half: Vec<f64> = f_half.iter().map(|&x| beta_exp(x, beta)).collect();
            let z_full = weighted(&raw_full, &config.rule);
            let z_half = weighted(&raw_half, &shared.half_rule);
            if (z_full - z_half).abs() > NORMALIZER_REL_TOL * refinement_scale(z_full) {
                return Ok(None);
            }
            if !z_full.is_finite() {
                return Err(Error::numeric(format!("deformed normalizer Z = {z_full}")));
            }
            if z_full < 1e-300 {
                return Err(Error::degenerate(format!(
                    "deformed normalizer Z = {z_full} is numerically zero"
                )));
            }
            let a_alpha = beta_log(z_full, config.alpha.alpha())?;
            let density = KernelDeformedDensity::from_parts(
                NaturalParam::rkhs(rkhs),
                config.alpha,
                z_full,
                a_alpha,
                support,
                config.base.clone(),
                config.rule.clone(),
            );
            let p_q: Vec<f64> = raw_full.iter().map(|&p| p / z_full).collect();
            Ok(Some((
                AttentionDensity::KernelDeformed(density),
                EmittedParams::Kernel { gamma },
                p_q,
            )))
        }
        _ => Ok(None),
    }
}

fn evaluate_head(
    v: &DVector<f64>,
    params: &HeadParams,
    config: &AttentionConfig,
    basis: &BasisSet,
    shared: Option<&SharedNodeMatrices>,
) -> Result<HeadCache> {
    let mut fast = None;
    if let (HeadParams::Kernel { w }, Some(s)) = (params, shared) {
        if config.family.is_kernel() {
            fast = fast_kernel_head(v, w, config, s)?;
        }
    }
    let (density, emitted, p_q, nodes, weights) = match fast {
        Some((density, emitted, p_q)) => {
            let s = shared.expect("fast path implies shared matrices");
            (density, emitted, p_q, s.nodes.clone(), config.rule.weights().to_vec())
        }
        None => {
            let (density, emitted) = emit_head(v, params, config)?;
            let rule = density.stored_rule().unwrap_or(&config.rule).clone();
            let nodes = rule.nodes().to_vec();
            let weights = rule.weights().to_vec();
            let p_q: Vec<f64> = nodes.iter().map(|&t| density.pdf_q(t)).collect();
            (density, emitted, p_q, nodes, weights)
        }
    };

    let reuse = shared.filter(|s| s.nodes == nodes);
    let psi = match reuse {
        Some(s) => s.psi.clone(),
        None => basis_at_nodes(basis, &nodes),
    };
    let kernel_cols = if config.family.is_kernel() {
        Some(match reuse {
            Some(s) => s.kernel_at_nodes.clone(),
            None => kernel_at_nodes(&config.kernel, &config.inducing_points, &nodes),
        })
    } else {
        None
    };

    // m[n] = Σ_j w_j ψ_n(t_j) p(t_j).
    let weighted_p = DVector::from_iterator(
        nodes.len(),
        weights.iter().zip(&p_q).map(|(&w, &p)| w * p),
    );
    let m = &psi * &weighted_p;
    Ok(HeadCache {
        density,
        weights,
        nodes,
        p_q,
        psi,
        kernel_at_nodes: kernel_cols,
        emitted,
        m,
    })
}

/// Full forward pass: per-head densities, basis moments `m_h = E_{p_h}[Ψ]`,
/// and the concatenated context `c = (B m_1, …, B m_H)`. All heads share one
/// value function.
pub fn forward_context(
    v: &DVector<f64>,
    heads: &[HeadParams],
    value_params: &ValueParams,
    basis: &BasisSet,
    config: &AttentionConfig,
    shared: Option<&SharedNodeMatrices>,
) -> Result<(ContextVector, ForwardCache)> {
    let obs_dims = value_params.obs_dims();
    if value_params.basis_len() != basis.len() {
        return Err(Error::invalid(format!(
            "value params expect {} basis functions, basis has {}",
            value_params.basis_len(),
            basis.len()
        )));
    }
    let mut values = DVector::zeros(heads.len() * obs_dims);
    let mut head_caches = Vec::with_capacity(heads.len());
    for (h, params) in heads.iter().enumerate() {
        let cache = evaluate_head(v, params, config, basis, shared)?;
        let c_h = value_params.matrix() * &cache.m;
        for i in 0..obs_dims {
            values[h * obs_dims + i] = c_h[i];
        }
        if c_h.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("head {h} produced a non-finite context")));
        }
        head_caches.push(cache);
    }
    Ok((
        ContextVector {
            values,
            heads: heads.len(),
            obs_dims,
        },
        ForwardCache {
            v: v.clone(),
            heads: head_caches,
        },
    ))
}

/// Directional derivative of the log-normalizer.
///
/// Exponential family: `A'(f)[g] = E_p[g]`. Deformed family: the escort
/// expectation `∫ p^{2-α} g dQ / ∫ p^{2-α} dQ`. Mixtures have no
/// log-normalizer and are rejected.
pub fn grad_log_normalizer<F: Fn(f64) -> f64>(
    d: &AttentionDensity,
    g: F,
    rule: &QuadratureRule,
) -> Result<f64> {
    match d {
        AttentionDensity::KernelExponential(_) | AttentionDensity::ContinuousSoftmax { .. } => {
            let num = integrate(|t| g(t) * d.pdf_q(t), rule)?;
            Ok(num.value)
        }
        AttentionDensity::KernelDeformed(kd) | AttentionDensity::ContinuousSparsemax(kd) => {
            if kd.support().is_empty() {
                return Err(Error::degenerate("escort of an empty-support density"));
            }
            let split = rule.with_breakpoints(&kd.support().interior_breakpoints(rule.domain()))?;
            let exponent = 2.0 - kd.alpha().alpha();
            let escort = |t: f64| {
                let p = kd.pdf_q(t);
                if p > 0.0 {
                    p.powf(exponent)
                } else {
                    0.0
                }
            };
            let den = integrate(&escort, &split)?.value;
            if !(den > 0.0) {
                return Err(Error::degenerate("escort normalizer vanished"));
            }
            let num = integrate(|t| g(t) * escort(t), &split)?.value;
            Ok(num / den)
        }
        AttentionDensity::GaussianMixture { .. } => Err(Error::invalid(
            "Gaussian mixtures have no log-normalizer to differentiate",
        )),
    }
}
