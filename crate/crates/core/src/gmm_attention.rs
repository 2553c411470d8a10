//! Weighted EM fitting of Gaussian mixture attention densities.
//!
//! A discrete attention distribution (locations `t_l` with weights `w_l`)
//! plays the role of the data weights. Each EM iteration matches the model's
//! expected joint sufficient statistics — multinomial indicators plus
//! per-component `(t, t²)` blocks — to the responsibility-weighted empirical
//! statistics of the previous iterate; [`verify_moment_matching`] measures
//! that identity directly and is pinned to 1e-8 in the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::densities::GaussianMixtureDensity;
use crate::error::{Error, Result};

/// Total-responsibility mass below which a component counts as starved.
const STARVATION_EPS: f64 = 1e-12;

/// Discrete attention: locations with normalized nonnegative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteAttention {
    locations: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteAttention {
    pub fn new(locations: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if locations.is_empty() || locations.len() != weights.len() {
            return Err(Error::invalid(format!(
                "need matching nonempty locations and weights, got {} and {}",
                locations.len(),
                weights.len()
            )));
        }
        if locations.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("locations must be finite"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights must not all be zero"));
        }
        Ok(DiscreteAttention {
            locations,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Builds weights as a softmax over raw scores.
    pub fn from_scores(locations: Vec<f64>, scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("scores must be nonempty"));
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        DiscreteAttention::new(locations, weights)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn weighted_mean(&self) -> f64 {
        self.locations
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * t)
            .sum()
    }

    fn weighted_variance(&self) -> f64 {
        let mean = self.weighted_mean();
        self.locations
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * (t - mean) * (t - mean))
            .sum()
    }
}

/// Expected joint sufficient statistics of a location/latent-state pair:
/// `K-1` multinomial indicators followed by per-component `(t, t²)` blocks,
/// `M = (K-1) + 2K` entries in total.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSuffStats {
    values: Vec<f64>,
    num_components: usize,
    starved: Vec<usize>,
}

impl JointSuffStats {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    /// Components whose total responsibility mass fell below 1e-12.
    pub fn starved_components(&self) -> &[usize] {
        &self.starved
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn indicator_index(k: usize) -> usize {
        k
    }

    fn t_index(num_components: usize, k: usize) -> usize {
        (num_components - 1) + 2 * k
    }

    fn t_sq_index(num_components: usize, k: usize) -> usize {
        (num_components - 1) + 2 * k + 1
    }
}

/// Responsibility-weighted empirical statistics
/// `Σ_l w_l Σ_k p_old(Z=k | t_l) φ_m(t_l, k)`, the right-hand side of the
/// EM moment-matching identity. Bayes responsibilities come from
/// `responsibilities_from`; `params` only fixes the expected component count.
pub fn expected_joint_stats(
    params: &GaussianMixtureDensity,
    att: &DiscreteAttention,
    responsibilities_from: &GaussianMixtureDensity,
) -> Result<JointSuffStats> {
    let k = params.num_components();
    if responsibilities_from.num_components() != k {
        return Err(Error::invalid(format!(
            "component count mismatch: {k} vs {}",
            responsibilities_from.num_components()
        )));
    }
    let m = (k - 1) + 2 * k;
    let mut values = vec![0.0; m];
    let mut mass = vec![0.0; k];
    for (&t, &w) in att.locations().iter().zip(att.weights()) {
        let resp = responsibilities_from.responsibilities(t);
        for (comp, &r) in resp.iter().enumerate() {
            let wr = w * r;
            mass[comp] += wr;
            if comp + 1 < k {
                values[JointSuffStats::indicator_index(comp)] += wr;
            }
            values[JointSuffStats::t_index(k, comp)] += wr * t;
            values[JointSuffStats::t_sq_index(k, comp)] += wr * t * t;
        }
    }
    let starved = mass
        .iter()
        .enumerate()
        .filter(|(_, &m)| m < STARVATION_EPS)
        .map(|(i, _)| i)
        .collect();
    Ok(JointSuffStats {
        values,
        num_components: k,
        starved,
    })
}

/// Model-side expected joint sufficient statistics, computed analytically:
/// `E[I(z=k)] = π_k`, `E[I(z=k)t] = π_k μ_k`, `E[I(z=k)t²] = π_k(σ_k²+μ_k²)`.
pub fn model_joint_stats(params: &GaussianMixtureDensity) -> JointSuffStats {
    let k = params.num_components();
    let mut values = vec![0.0; (k - 1) + 2 * k];
    for comp in 0..k {
        let pi = params.weights()[comp];
        let mu = params.means()[comp];
        let var = params.variances()[comp];
        if comp + 1 < k {
            values[JointSuffStats::indicator_index(comp)] = pi;
        }
        values[JointSuffStats::t_index(k, comp)] = pi * mu;
        values[JointSuffStats::t_sq_index(k, comp)] = pi * (var + mu * mu);
    }
    JointSuffStats {
        values,
        num_components: k,
        starved: Vec::new(),
    }
}

/// Max-norm residual between the analytic expected joint statistics of
/// `params_new` and the responsibility-weighted empirical statistics under
/// `params_old`. Below 1e-8 after an exact (unfloored) M-step.
pub fn verify_moment_matching(
    params_new: &GaussianMixtureDensity,
    params_old: &GaussianMixtureDensity,
    att: &DiscreteAttention,
) -> Result<f64> {
    let lhs = model_joint_stats(params_new);
    let rhs = expected_joint_stats(params_new, att, params_old)?;
    Ok(lhs
        .values()
        .iter()
        .zip(rhs.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Weighted log-likelihood `Σ_l w_l log Σ_k π_k N(t_l; μ_k, σ_k²)`.
pub fn weighted_log_likelihood(params: &GaussianMixtureDensity, att: &DiscreteAttention) -> f64 {
    att.locations()
        .iter()
        .zip(att.weights())
        .map(|(&t, &w)| w * params.pdf_lebesgue(t).max(1e-300).ln())
        .sum()
}

/// One EM iteration: E-step responsibilities from `current`, M-step weighted
/// MLE with the variance floor. A starved component is reset to a random
/// data location drawn from `rng`.
pub fn em_step(
    current: &GaussianMixtureDensity,
    att: &DiscreteAttention,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianMixtureDensity> {
    let k = current.num_components();
    let l = att.len();
    let mut resp = vec![vec![0.0; k]; l];
    for (i, &t) in att.locations().iter().enumerate() {
        resp[i] = current.responsibilities(t);
    }

    let mut pis = vec![0.0; k];
    let mut means = vec![0.0; k];
    let mut vars = vec![0.0; k];
    for comp in 0..k {
        let mut mass = 0.0;
        let mut first = 0.0;
        for (i, &t) in att.locations().iter().enumerate() {
            let wr = att.weights()[i] * resp[i][comp];
            mass += wr;
            first += wr * t;
        }
        if mass < STARVATION_EPS {
            let idx = rng.gen_range(0..l);
            pis[comp] = 1.0 / l as f64;
            means[comp] = att.locations()[idx];
            vars[comp] = att.weighted_variance().max(floor);
            continue;
        }
        let mu = first / mass;
        let mut second = 0.0;
        for (i, &t) in att.locations().iter().enumerate() {
            let wr = att.weights()[i] * resp[i][comp];
            second += wr * (t - mu) * (t - mu);
        }
        pis[comp] = mass;
        means[comp] = mu;
        vars[comp] = (second / mass).max(floor);
    }
    GaussianMixtureDensity::new(pis, means, vars, floor)
}

/// Result of [`weighted_em_fit`].
#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixtureDensity,
    pub converged: bool,
    pub iterations: usize,
    /// Weighted log-likelihood before each iteration plus the final value.
    pub log_likelihood: Vec<f64>,
}

/// Quantile-based initialization: means at the `K` weighted quantiles,
/// the global weighted variance everywhere, uniform component weights.
pub fn init_from_quantiles(
    att: &DiscreteAttention,
    k: usize,
    floor: f64,
) -> Result<GaussianMixtureDensity> {
    if k == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    let mut order: Vec<usize> = (0..att.len()).collect();
    order.sort_by(|&a, &b| att.locations()[a].partial_cmp(&att.locations()[b]).unwrap());
    let mut means = Vec::with_capacity(k);
    for j in 0..k {
        let target = (j as f64 + 0.5) / k as f64;
        let mut acc = 0.0;
        let mut chosen = att.locations()[*order.last().unwrap()];
        for &i in &order {
            acc += att.weights()[i];
            if acc >= target {
                chosen = att.locations()[i];
                break;
            }
        }
        means.push(chosen);
    }
    let var = att.weighted_variance().max(floor);
    GaussianMixtureDensity::new(vec![1.0 / k as f64; k], means, vec![var; k], floor)
}

/// Runs weighted EM until the log-likelihood improvement drops below `tol`
/// or `max_iters` is reached.
pub fn weighted_em_fit(
    att: &DiscreteAttention,
    k: usize,
    init: &GaussianMixtureDensity,
    max_iters: usize,
    tol: f64,
    floor: f64,
    seed: u64,
) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    if k > att.len() {
        return Err(Error::invalid(format!(
            "K = {k} exceeds the number of attention locations {}",
            att.len()
        )));
    }
    if init.num_components() != k {
        return Err(Error::invalid(format!(
            "init has {} components, expected {k}",
            init.num_components()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixture = init.clone();
    let mut trace = vec![weighted_log_likelihood(&mixture, att)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        mixture = em_step(&mixture, att, floor, &mut rng)?;
        iterations += 1;
        let ll = weighted_log_likelihood(&mixture, att);
        let improvement = ll - trace.last().unwrap();
        trace.push(ll);
        if improvement.abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        mixture,
        converged,
        iterations,
        log_likelihood: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::gmm_pdf;

    fn bimodal_attention() -> DiscreteAttention {
        // Two tight clusters near 0.2 and 0.8.
        let locations = vec![0.19, 0.2, 0.21, 0.22, 0.78, 0.8, 0.81, 0.79];
        let weights = vec![1.0; 8];
        DiscreteAttention::new(locations, weights).unwrap()
    }

    #[test]
    fn weights_are_normalized() {
        let att = DiscreteAttention::new(vec![0.0, 1.0], vec![2.0, 6.0]).unwrap();
        assert!((att.weights()[0] - 0.25).abs() < 1e-15);
        let total: f64 = att.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_scores_become_weights() {
        let att = DiscreteAttention::from_scores(vec![0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((att.weights()[0] - 0.5).abs() < 1e-15);
        let att = DiscreteAttention::from_scores(vec![0.0, 1.0], &[100.0, 0.0]).unwrap();
        assert!(att.weights()[0] > 0.999);
    }

    #[test]
    fn single_component_stats_reduce_to_weighted_moments() {
        let att = DiscreteAttention::new(vec![0.1, 0.4, 0.7], vec![0.2, 0.3, 0.5]).unwrap();
        let mix = GaussianMixtureDensity::new(vec![1.0], vec![0.5], vec![0.1], 1e-6).unwrap();
        let stats = expected_joint_stats(&mix, &att, &mix).unwrap();
        let m1: f64 = att
            .locations()
            .iter()
            .zip(att.weights())
            .map(|(&t, &w)| w * t)
            .sum();
        let m2: f64 = att
            .locations()
            .iter()
            .zip(att.weights())
            .map(|(&t, &w)| w * t * t)
            .sum();
        assert_eq!(stats.len(), 2);
        assert!((stats.values()[0] - m1).abs() < 1e-14);
        assert!((stats.values()[1] - m2).abs() < 1e-14);
        assert!(stats.starved_components().is_empty());
    }

    #[test]
    fn uniform_weights_match_unweighted_em_statistics() {
        let locations = vec![0.1, 0.3, 0.5, 0.7];
        let att = DiscreteAttention::new(locations.clone(), vec![1.0; 4]).unwrap();
        let mix = GaussianMixtureDensity::new(
            vec![0.5, 0.5],
            vec![0.2, 0.6],
            vec![0.02, 0.02],
            1e-6,
        )
        .unwrap();
        let stats = expected_joint_stats(&mix, &att, &mix).unwrap();
        // Unweighted oracle: mean over points of responsibilities times stats.
        let l = locations.len() as f64;
        let mut oracle = vec![0.0; 5];
        for &t in &locations {
            let r = mix.responsibilities(t);
            oracle[0] += r[0] / l;
            oracle[1] += r[0] * t / l;
            oracle[2] += r[0] * t * t / l;
            oracle[3] += r[1] * t / l;
            oracle[4] += r[1] * t * t / l;
        }
        assert!((stats.values()[0] - oracle[0]).abs() < 1e-14);
        assert!((stats.values()[1] - oracle[1]).abs() < 1e-14);
        assert!((stats.values()[2] - oracle[2]).abs() < 1e-14);
        assert!((stats.values()[3] - oracle[3]).abs() < 1e-14);
        assert!((stats.values()[4] - oracle[4]).abs() < 1e-14);
    }

    #[test]
    fn separated_clusters_give_one_hot_responsibilities() {
        // Weight concentrated on the cluster near 1; the second component
        // sits there, so its stats approach the cluster moments.
        let locations = vec![0.0, 0.01, 0.99, 1.0];
        let weights = vec![0.01, 0.01, 0.49, 0.49];
        let att = DiscreteAttention::new(locations.clone(), weights).unwrap();
        let mix = GaussianMixtureDensity::new(
            vec![0.5, 0.5],
            vec![0.0, 1.0],
            vec![0.001, 0.001],
            1e-6,
        )
        .unwrap();
        // Brute-force Bayes oracle at a cluster-1 point.
        let t: f64 = 0.99;
        let n0 = 0.5 * (-0.5 * (t - 0.0) * (t - 0.0) / 0.001).exp();
        let n1 = 0.5 * (-0.5 * (t - 1.0) * (t - 1.0) / 0.001).exp();
        let oracle = n1 / (n0 + n1);
        let got = mix.responsibilities(t)[1];
        assert!((got - oracle).abs() < 1e-12);
        assert!(got > 1.0 - 1e-9, "responsibility {got}");

        let stats = expected_joint_stats(&mix, &att, &mix).unwrap();
        // Component-1 first moment ≈ weighted cluster mean mass:
        // 0.49·0.99 + 0.49·1.0 over weight 0.98.
        let t_idx = 1 + 2; // (K-1) + 2·1
        assert!((stats.values()[t_idx] - (0.49 * 0.99 + 0.49 * 1.0)).abs() < 1e-6);
    }

    #[test]
    fn k1_fit_is_the_weighted_mle_closed_form() {
        let att = DiscreteAttention::new(vec![0.1, 0.5, 0.9], vec![0.2, 0.5, 0.3]).unwrap();
        let init = GaussianMixtureDensity::new(vec![1.0], vec![0.0], vec![1.0], 1e-6).unwrap();
        let fit = weighted_em_fit(&att, 1, &init, 10, 1e-12, 1e-6, 0).unwrap();
        let mean: f64 = att
            .locations()
            .iter()
            .zip(att.weights())
            .map(|(&t, &w)| w * t)
            .sum();
        let var: f64 = att
            .locations()
            .iter()
            .zip(att.weights())
            .map(|(&t, &w)| w * (t - mean) * (t - mean))
            .sum();
        assert!((fit.mixture.means()[0] - mean).abs() < 1e-12);
        assert!((fit.mixture.variances()[0] - var).abs() < 1e-12);
        assert_eq!(fit.mixture.weights(), &[1.0]);
    }

    #[test]
    fn identical_locations_collapse_to_the_floor() {
        let att = DiscreteAttention::new(vec![0.4; 5], vec![1.0; 5]).unwrap();
        let init = init_from_quantiles(&att, 1, 1e-6).unwrap();
        let fit = weighted_em_fit(&att, 1, &init, 5, 1e-12, 1e-6, 0).unwrap();
        assert_eq!(fit.mixture.variances()[0], 1e-6);
        assert_eq!(fit.mixture.weights(), &[1.0]);
    }

    #[test]
    fn bimodal_attention_recovers_both_modes() {
        let att = bimodal_attention();
        let init = init_from_quantiles(&att, 2, 1e-6).unwrap();
        let fit = weighted_em_fit(&att, 2, &init, 100, 1e-12, 1e-6, 0).unwrap();
        let mut means = fit.mixture.means().to_vec();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] - 0.205).abs() < 0.02, "low mode {}", means[0]);
        assert!((means[1] - 0.795).abs() < 0.02, "high mode {}", means[1]);
    }

    #[test]
    fn moment_matching_holds_after_one_exact_m_step() {
        let att = bimodal_attention();
        let old = init_from_quantiles(&att, 2, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let new = em_step(&old, &att, 1e-6, &mut rng).unwrap();
        let residual = verify_moment_matching(&new, &old, &att).unwrap();
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn moment_matching_is_sensitive_to_perturbation() {
        let att = bimodal_attention();
        let old = init_from_quantiles(&att, 2, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let new = em_step(&old, &att, 1e-6, &mut rng).unwrap();
        let shifted = GaussianMixtureDensity::new(
            new.weights().to_vec(),
            new.means().iter().map(|m| m + 0.1).collect(),
            new.variances().to_vec(),
            1e-6,
        )
        .unwrap();
        let residual = verify_moment_matching(&shifted, &old, &att).unwrap();
        assert!(residual > 0.01, "residual {residual}");
    }

    #[test]
    fn k1_moment_matching_is_algebraically_exact() {
        let att = DiscreteAttention::new(vec![0.2, 0.5, 0.8], vec![0.1, 0.6, 0.3]).unwrap();
        let old = GaussianMixtureDensity::new(vec![1.0], vec![0.3], vec![0.5], 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let new = em_step(&old, &att, 1e-6, &mut rng).unwrap();
        let residual = verify_moment_matching(&new, &old, &att).unwrap();
        assert!(residual < 1e-14, "residual {residual}");
    }

    #[test]
    fn log_likelihood_is_monotone_across_iterations() {
        let att = bimodal_attention();
        let init = init_from_quantiles(&att, 2, 1e-6).unwrap();
        let fit = weighted_em_fit(&att, 2, &init, 50, 0.0, 1e-6, 0).unwrap();
        for pair in fit.log_likelihood.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-10,
                "log-likelihood decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn component_permutation_leaves_pdf_invariant() {
        let att = bimodal_attention();
        let init = init_from_quantiles(&att, 2, 1e-6).unwrap();
        let fit = weighted_em_fit(&att, 2, &init, 30, 1e-10, 1e-6, 0).unwrap();
        let m = &fit.mixture;
        let swapped = GaussianMixtureDensity::new(
            vec![m.weights()[1], m.weights()[0]],
            vec![m.means()[1], m.means()[0]],
            vec![m.variances()[1], m.variances()[0]],
            1e-6,
        )
        .unwrap();
        for t in [0.0, 0.2, 0.41, 0.8, 1.0] {
            assert!((gmm_pdf(m, t) - gmm_pdf(&swapped, t)).abs() < 1e-14);
        }
    }

    #[test]
    fn k_larger_than_data_is_an_argument_error() {
        let att = DiscreteAttention::new(vec![0.5, 0.6], vec![1.0, 1.0]).unwrap();
        let init = init_from_quantiles(&att, 2, 1e-6).unwrap();
        assert!(weighted_em_fit(&att, 3, &init, 5, 1e-8, 1e-6, 0).is_err());
    }
}
