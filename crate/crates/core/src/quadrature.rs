//! Deterministic 1-D quadrature against base measures.
//!
//! Rules are composite Gauss-Legendre over the base density's truncated
//! domain, with `q0` folded into the weights so `Σ wⱼ f(tⱼ) ≈ ∫ f dQ`.
//! Composite Gauss-Legendre (rather than Gauss-Hermite) keeps one code path
//! for smooth dense integrands and for sparse deformed integrands with kinks:
//! the panel layout can be split at detected support boundaries before
//! integrating.
//!
//! All summation is pairwise in a fixed order, so identical inputs produce
//! bit-identical results.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::deformed_math::AlphaParam;
use crate::densities::BaseDensity;
use crate::error::{Error, Result};

/// Refinement stops once `err_estimate <= REL_TOL * max(|value|, 1e-6)`.
const REL_TOL: f64 = 1e-8;
/// Hard cap on the number of panels reached by adaptive refinement.
const PANEL_CAP: usize = 1 << 14;
/// Support scans use at least this many probe points across the domain.
const MIN_SUPPORT_SCAN: usize = 512;
/// Bisection tolerance (in location units) for support interval endpoints.
const SUPPORT_BISECT_TOL: f64 = 1e-10;

/// Sums `xs` by recursive halving. Fixed association order makes the result
/// independent of chunking decisions elsewhere and keeps rounding error at
/// `O(log n)` ulps.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn gl_cache() -> &'static Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, ascending nodes.
/// Newton iteration on the Legendre recurrence; cached per order.
fn legendre_nodes_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(n >= 1);
    if let Some(cached) = gl_cache().lock().unwrap().get(&n) {
        return cached.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dpn = 0.0;
        for _ in 0..100 {
            let mut p_prev = 1.0;
            let mut p = x;
            for k in 2..=n {
                let kf = k as f64;
                let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
                p_prev = p;
                p = p_next;
            }
            dpn = nf * (x * p - p_prev) / (x * x - 1.0);
            let dx = -p / dpn;
            x += dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
    }
    gl_cache()
        .lock()
        .unwrap()
        .insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// A composite quadrature rule with the base density folded into the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    base: BaseDensity,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    domain: (f64, f64),
    panel_count: usize,
    nodes_per_panel: usize,
    breakpoints: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn base(&self) -> &BaseDensity {
        &self.base
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn panel_count(&self) -> usize {
        self.panel_count
    }

    pub fn nodes_per_panel(&self) -> usize {
        self.nodes_per_panel
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// `Σ wⱼ`, which approximates `Q([lo, hi])`.
    pub fn total_weight(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    /// Rebuilds this rule with a different nominal panel count, keeping the
    /// base, nodes per panel and breakpoints.
    pub fn with_panels(&self, panels: usize) -> Result<QuadratureRule> {
        build_rule_split(&self.base, panels, self.nodes_per_panel, &self.breakpoints)
    }

    /// Rebuilds this rule with extra interior breakpoints merged in.
    pub fn with_breakpoints(&self, extra: &[f64]) -> Result<QuadratureRule> {
        let mut all = self.breakpoints.clone();
        all.extend_from_slice(extra);
        build_rule_split(&self.base, self.panel_count, self.nodes_per_panel, &all)
    }

    /// `Σ wⱼ f(tⱼ)` with a non-finiteness check on the integrand values.
    pub fn sum_with<F: Fn(f64) -> f64>(&self, f: &F) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.nodes.len());
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "integrand is not finite at t = {t} (value {v})"
                )));
            }
            terms.push(w * v);
        }
        Ok(pairwise_sum(&terms))
    }
}

/// Builds a composite Gauss-Legendre rule over the base's truncated domain.
pub fn build_rule(base: &BaseDensity, panels: usize, nodes_per_panel: usize) -> Result<QuadratureRule> {
    build_rule_split(base, panels, nodes_per_panel, &[])
}

/// As [`build_rule`], but forces panel edges at the given interior
/// breakpoints (used to split panels at support boundaries). Panels are
/// distributed across the resulting segments proportionally to length, with
/// at least one panel per segment.
pub fn build_rule_split(
    base: &BaseDensity,
    panels: usize,
    nodes_per_panel: usize,
    breakpoints: &[f64],
) -> Result<QuadratureRule> {
    if panels < 1 {
        return Err(Error::invalid("quadrature rule needs at least 1 panel"));
    }
    if nodes_per_panel < 2 {
        return Err(Error::invalid("quadrature rule needs at least 2 nodes per panel"));
    }
    let (lo, hi) = base.domain();
    if !(lo < hi) {
        return Err(Error::invalid(format!("degenerate domain [{lo}, {hi}]")));
    }

    let length = hi - lo;
    let mut breaks: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|b| *b > lo + 1e-14 * length && *b < hi - 1e-14 * length)
        .collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-13 * length);

    let mut edges = Vec::with_capacity(breaks.len() + 2);
    edges.push(lo);
    edges.extend_from_slice(&breaks);
    edges.push(hi);

    let (gl_nodes, gl_weights) = legendre_nodes_weights(nodes_per_panel);

    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut panel_count = 0usize;
    for seg in edges.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let seg_panels = ((panels as f64) * (b - a) / length).round().max(1.0) as usize;
        let h = (b - a) / seg_panels as f64;
        for p in 0..seg_panels {
            let pa = a + p as f64 * h;
            let mid = pa + 0.5 * h;
            let half = 0.5 * h;
            for (&x, &w) in gl_nodes.iter().zip(&gl_weights) {
                let t = mid + half * x;
                nodes.push(t);
                weights.push(half * w * base.q0(t));
            }
        }
        panel_count += seg_panels;
    }

    Ok(QuadratureRule {
        base: base.clone(),
        nodes,
        weights,
        domain: (lo, hi),
        panel_count,
        nodes_per_panel,
        breakpoints: breaks,
    })
}

/// Result of an adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct Integral {
    pub value: f64,
    /// `|value - value at half the panel resolution|`.
    pub err_estimate: f64,
    /// False when the panel cap was reached before the error target.
    pub converged: bool,
}

fn err_scale(value: f64) -> f64 {
    value.abs().max(1e-6)
}

/// Integrates `f` against the rule's base measure, doubling panels until the
/// half-resolution error estimate is below `1e-8` relative or the panel cap
/// `2^14` is reached (flagged via `converged = false`).
pub fn integrate<F: Fn(f64) -> f64>(f: F, rule: &QuadratureRule) -> Result<Integral> {
    integrate_refined(f, rule).map(|(integral, _)| integral)
}

/// As [`integrate`], but also returns the rule at the resolution that met the
/// error target, so callers can keep evaluating other integrands on it.
pub fn integrate_refined<F: Fn(f64) -> f64>(
    f: F,
    rule: &QuadratureRule,
) -> Result<(Integral, QuadratureRule)> {
    let mut prev = rule
        .with_panels(half_resolution_panels(rule.panel_count))?
        .sum_with(&f)?;
    let mut current = rule.clone();
    let mut value = current.sum_with(&f)?;
    let mut err = (value - prev).abs();
    while err > REL_TOL * err_scale(value) && current.panel_count < PANEL_CAP {
        let next = current.with_panels((current.panel_count * 2).min(PANEL_CAP))?;
        prev = value;
        value = next.sum_with(&f)?;
        err = (value - prev).abs();
        current = next;
    }
    let converged = err <= REL_TOL * err_scale(value);
    Ok((
        Integral {
            value,
            err_estimate: err,
            converged,
        },
        current,
    ))
}

/// Ordered disjoint intervals where a deformed density is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    intervals: Vec<(f64, f64)>,
}

impl SupportSet {
    pub fn empty() -> Self {
        SupportSet { intervals: Vec::new() }
    }

    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for pair in intervals.windows(2) {
            if pair[0].1 >= pair[1].0 {
                return Err(Error::invalid("support intervals must be sorted and disjoint"));
            }
        }
        if intervals.iter().any(|&(a, b)| a >= b) {
            return Err(Error::invalid("support intervals must be nonempty"));
        }
        Ok(SupportSet { intervals })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && t <= b)
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|&(a, b)| b - a).sum()
    }

    /// Endpoints strictly inside `domain`, for splitting quadrature panels.
    pub fn interior_breakpoints(&self, domain: (f64, f64)) -> Vec<f64> {
        let span = domain.1 - domain.0;
        let mut breaks = Vec::new();
        for &(a, b) in &self.intervals {
            for e in [a, b] {
                if e > domain.0 + 1e-13 * span && e < domain.1 - 1e-13 * span {
                    breaks.push(e);
                }
            }
        }
        breaks
    }
}

/// Locates the maximal intervals where `1 + (α-1) f̃(t) > 0`.
///
/// Sign changes are detected on a scan grid — the rule's nodes topped up to
/// at least 512 uniform probes — and refined by bisection to 1e-10. Support
/// islands narrower than the scan spacing can be missed; the 512-probe floor
/// keeps that spacing below `domain / 512`.
pub fn find_support<F: Fn(f64) -> f64>(
    f_tilde: F,
    alpha: &AlphaParam,
    rule: &QuadratureRule,
) -> SupportSet {
    let node_values: Vec<f64> = rule.nodes.iter().map(|&t| f_tilde(t)).collect();
    find_support_with_values(&f_tilde, &node_values, alpha, rule)
}

/// As [`find_support`], reusing already-computed `f̃` values at the rule's
/// nodes; the closure is only consulted for probe top-up and bisection.
pub fn find_support_with_values<F: Fn(f64) -> f64>(
    f_tilde: &F,
    node_values: &[f64],
    alpha: &AlphaParam,
    rule: &QuadratureRule,
) -> SupportSet {
    debug_assert_eq!(node_values.len(), rule.nodes.len());
    let am1 = alpha.alpha() - 1.0;
    let g = |t: f64| 1.0 + am1 * f_tilde(t);
    let (lo, hi) = rule.domain;

    // Scan grid: domain endpoints, the nodes, and (only when the rule is
    // coarse) uniform top-up probes.
    let mut grid: Vec<(f64, f64)> = Vec::with_capacity(rule.nodes.len() + MIN_SUPPORT_SCAN + 2);
    grid.push((lo, g(lo)));
    grid.push((hi, g(hi)));
    for (&t, &f) in rule.nodes.iter().zip(node_values) {
        grid.push((t, 1.0 + am1 * f));
    }
    if rule.nodes.len() < MIN_SUPPORT_SCAN {
        let step = (hi - lo) / MIN_SUPPORT_SCAN as f64;
        for i in 1..MIN_SUPPORT_SCAN {
            let t = lo + i as f64 * step;
            grid.push((t, g(t)));
        }
    }
    grid.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    grid.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-15 * (hi - lo));

    let bisect = |mut neg: f64, mut pos: f64| -> f64 {
        while (neg - pos).abs() > SUPPORT_BISECT_TOL {
            let mid = 0.5 * (neg + pos);
            if g(mid) > 0.0 {
                pos = mid;
            } else {
                neg = mid;
            }
        }
        0.5 * (neg + pos)
    };

    let mut intervals = Vec::new();
    let mut i = 0;
    while i < grid.len() {
        if !(grid[i].1 > 0.0) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < grid.len() && grid[j + 1].1 > 0.0 {
            j += 1;
        }
        let left = if i == 0 {
            lo
        } else {
            bisect(grid[i - 1].0, grid[i].0)
        };
        let right = if j + 1 == grid.len() {
            hi
        } else {
            bisect(grid[j + 1].0, grid[j].0)
        };
        intervals.push((left, right));
        i = j + 1;
    }

    SupportSet { intervals }
}

/// Relative error target shared by [`integrate`] and the hot-path
/// normalizers in the attention module.
pub(crate) const NORMALIZER_REL_TOL: f64 = REL_TOL;

pub(crate) fn refinement_scale(value: f64) -> f64 {
    err_scale(value)
}

/// The coarse resolution [`integrate_refined`] compares against.
pub(crate) fn half_resolution_panels(panels: usize) -> usize {
    if panels >= 2 {
        panels / 2
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformed_math::AlphaParam;

    fn uniform01() -> BaseDensity {
        BaseDensity::uniform(0.0, 1.0).unwrap()
    }

    fn standard_gaussian() -> BaseDensity {
        BaseDensity::gaussian(0.0, 1.0).unwrap()
    }

    #[test]
    fn uniform_total_mass_is_one() {
        let rule = build_rule(&uniform01(), 4, 16).unwrap();
        assert!((rule.total_weight() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_second_moment_is_unit_variance() {
        let rule = build_rule(&standard_gaussian(), 16, 16).unwrap();
        let second = integrate(|t| t * t, &rule).unwrap();
        assert!((second.value - 1.0).abs() < 1e-8, "got {}", second.value);
    }

    #[test]
    fn gaussian_first_moment_vanishes_by_symmetry() {
        let rule = build_rule(&standard_gaussian(), 16, 16).unwrap();
        let first = rule.sum_with(&|t| t).unwrap();
        assert!(first.abs() < 1e-12, "got {first}");
    }

    #[test]
    fn constant_integrand_converges_immediately() {
        let rule = build_rule(&uniform01(), 4, 8).unwrap();
        let result = integrate(|_| 1.0, &rule).unwrap();
        assert!((result.value - 1.0).abs() < 1e-12);
        assert!(result.err_estimate < 1e-12);
        assert!(result.converged);
    }

    #[test]
    fn gaussian_mgf_oracle() {
        // E[exp(T)] for a standard Gaussian is exp(1/2).
        let rule = build_rule(&standard_gaussian(), 16, 16).unwrap();
        let mgf = integrate(|t| t.exp(), &rule).unwrap();
        assert!((mgf.value - 0.5f64.exp()).abs() < 1e-10, "got {}", mgf.value);
        assert!(mgf.converged);
    }

    #[test]
    fn degenerate_domain_rejected() {
        // Constructors reject degenerate bases, so drive the error through a
        // rule rebuilt around one via serde-style construction.
        let base = BaseDensity::Uniform { lo: 1.0, hi: 1.0 };
        assert!(build_rule(&base, 4, 8).is_err());
    }

    #[test]
    fn invalid_rule_arguments_rejected() {
        assert!(build_rule(&uniform01(), 0, 8).is_err());
        assert!(build_rule(&uniform01(), 4, 1).is_err());
    }

    #[test]
    fn non_finite_integrand_is_a_numeric_error() {
        let rule = build_rule(&uniform01(), 4, 8).unwrap();
        assert!(integrate(|t| 1.0 / (t - t), &rule).is_err());
    }

    #[test]
    fn refinement_reduces_error_for_smooth_integrands() {
        // Doubling nodes-per-panel never increases the deviation from truth
        // on a smooth test family.
        let base = uniform01();
        let truth = 1.0 - (-1.0f64).exp(); // ∫₀¹ e^{-t} dt
        let mut last_err = f64::INFINITY;
        for npp in [2usize, 4, 8, 16] {
            let rule = build_rule(&base, 2, npp).unwrap();
            let value = rule.sum_with(&|t: f64| (-t).exp()).unwrap();
            let err = (value - truth).abs();
            assert!(
                err <= last_err + 1e-15,
                "error grew when refining: npp={npp}, err={err}, last={last_err}"
            );
            last_err = err;
        }
    }

    #[test]
    fn integrate_is_deterministic() {
        let rule = build_rule(&standard_gaussian(), 8, 12).unwrap();
        let a = integrate(|t| (t * 1.3).sin() + t * t, &rule).unwrap();
        let b = integrate(|t| (t * 1.3).sin() + t * t, &rule).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn support_of_inverted_parabola_matches_analytic_roots() {
        // f̃(t) = 2 - t², α = 2: support where 3 - t² > 0, i.e. ±√3.
        let base = BaseDensity::uniform(-2.0, 2.0).unwrap();
        let rule = build_rule(&base, 8, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let support = find_support(|t| 2.0 - t * t, &alpha, &rule);
        let intervals = support.intervals();
        assert_eq!(intervals.len(), 1);
        let root = 3.0f64.sqrt();
        assert!((intervals[0].0 + root).abs() < 1e-9, "left {}", intervals[0].0);
        assert!((intervals[0].1 - root).abs() < 1e-9, "right {}", intervals[0].1);
    }

    #[test]
    fn support_of_zero_function_is_whole_domain() {
        let rule = build_rule(&uniform01(), 4, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let support = find_support(|_| 0.0, &alpha, &rule);
        assert_eq!(support.intervals(), &[(0.0, 1.0)]);
    }

    #[test]
    fn support_of_minus_one_is_empty() {
        // g ≡ 0, which is not strictly positive.
        let rule = build_rule(&uniform01(), 4, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let support = find_support(|_| -1.0, &alpha, &rule);
        assert!(support.is_empty());
    }

    #[test]
    fn support_covers_exactly_the_positive_nodes() {
        let base = BaseDensity::uniform(-2.0, 2.0).unwrap();
        let rule = build_rule(&base, 16, 8).unwrap();
        let alpha = AlphaParam::new(1.7).unwrap();
        let f = |t: f64| (6.0 * t).sin() * 2.0 - 0.3;
        let support = find_support(f, &alpha, &rule);
        for &t in rule.nodes() {
            let positive = 1.0 + (alpha.alpha() - 1.0) * f(t) > 0.0;
            assert_eq!(
                support.contains(t),
                positive,
                "node {t} misclassified by support set"
            );
        }
    }

    #[test]
    fn split_rule_places_panel_edges_at_breakpoints() {
        let rule = build_rule_split(&uniform01(), 8, 6, &[0.3, 0.7]).unwrap();
        // Panel edges at breakpoints mean no node straddles them; integrating
        // a function with kinks at the breakpoints stays Gauss-accurate.
        let f = |t: f64| if t > 0.3 && t < 0.7 { 1.0 - t } else { 0.0 };
        let exact = 0.4 - 0.5 * (0.7f64.powi(2) - 0.3f64.powi(2));
        let value = rule.sum_with(&f).unwrap();
        assert!((value - exact).abs() < 1e-13, "got {value}, want {exact}");
    }

    #[test]
    fn truncation_divergence_regression() {
        // For k(x,y) = x³y³ + x⁴y⁴ and f(t) = t³ + t⁴ the unnormalized
        // density exp(f) has no finite integral against a standard Gaussian:
        // the truncated integral grows without bound as the truncation
        // widens, and overflows f64 by ±6σ.
        let std_normal = standard_gaussian();
        let truncated = |sigmas: f64| -> Result<f64> {
            // Uniform window as the truncation; fold the Gaussian pdf back
            // in by hand (uniform q0 cancels against the window length).
            let window = BaseDensity::uniform(-sigmas, sigmas).unwrap();
            let rule = build_rule(&window, 64, 10)?;
            rule.sum_with(&|t: f64| {
                (t.powi(3) + t.powi(4)).exp() * std_normal.q0(t) * 2.0 * sigmas
            })
        };
        let mut last = 0.0;
        for sigmas in [2.0, 3.0, 4.0] {
            let value = truncated(sigmas).unwrap();
            assert!(value > last, "sequence must increase: {value} after {last}");
            last = value;
        }
        assert!(last > 1e100, "±4σ truncation already exceeds 1e100, got {last}");
        // At ±6σ the integrand overflows f64: surfaced as a numeric error,
        // the finite-precision witness of divergence.
        assert!(truncated(6.0).is_err());
    }
}
