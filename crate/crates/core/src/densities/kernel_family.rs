//! Kernel exponential and kernel deformed exponential family densities.

use crate::deformed_math::{beta_exp, beta_log, AlphaParam};
use crate::densities::{BaseDensity, NaturalParam};
use crate::error::{Error, Result};
use crate::quadrature::{find_support, integrate_refined, QuadratureRule, SupportSet};

/// `p(t) = exp(f(t) - A)` w.r.t. the base measure, with `A = log ∫ exp(f) dQ`.
/// Strictly positive on the whole domain.
#[derive(Clone, Debug)]
pub struct KernelExpDensity {
    f: NaturalParam,
    log_normalizer: f64,
    base: BaseDensity,
    rule: QuadratureRule,
}

impl KernelExpDensity {
    /// Assembles a density whose normalizer was already computed on `rule`
    /// with the same error check [`normalize_kexp`] applies.
    pub(crate) fn from_parts(
        f: NaturalParam,
        log_normalizer: f64,
        base: BaseDensity,
        rule: QuadratureRule,
    ) -> Self {
        KernelExpDensity {
            f,
            log_normalizer,
            base,
            rule,
        }
    }

    pub fn f(&self) -> &NaturalParam {
        &self.f
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn base(&self) -> &BaseDensity {
        &self.base
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Density w.r.t. Q.
    pub fn pdf_q(&self, t: f64) -> f64 {
        (self.f.eval(t) - self.log_normalizer).exp()
    }
}

/// Normalizes `exp(f)` against the base measure.
///
/// The Gaussian RBF kernel in use is bounded, so the normalizer exists for
/// any base density; the integral is still shifted by `max f` before
/// exponentiating to keep large coefficients out of overflow range.
pub fn normalize_kexp(
    f: NaturalParam,
    base: &BaseDensity,
    rule: &QuadratureRule,
) -> Result<KernelExpDensity> {
    let f_max = rule
        .nodes()
        .iter()
        .map(|&t| f.eval(t))
        .fold(f64::NEG_INFINITY, f64::max);
    if !f_max.is_finite() {
        return Err(Error::numeric("natural parameter is not finite on the grid"));
    }
    let (integral, used_rule) = integrate_refined(|t| (f.eval(t) - f_max).exp(), rule)?;
    if !integral.converged {
        return Err(Error::numeric(
            "quadrature refinement cap reached while normalizing exp(f)",
        ));
    }
    if !(integral.value > 0.0) || !integral.value.is_finite() {
        return Err(Error::numeric(format!(
            "normalizer integral is {}, cannot normalize",
            integral.value
        )));
    }
    Ok(KernelExpDensity {
        f,
        log_normalizer: f_max + integral.value.ln(),
        base: base.clone(),
        rule: used_rule,
    })
}

/// `p(t) = (1/Z) exp_{2-α}(f̃(t))` w.r.t. the base measure, zero outside its
/// support set. `A_α = log_α Z` is the deformed log-normalizer.
#[derive(Clone, Debug)]
pub struct KernelDeformedDensity {
    f_tilde: NaturalParam,
    alpha: AlphaParam,
    z: f64,
    a_alpha: f64,
    support: SupportSet,
    base: BaseDensity,
    rule: QuadratureRule,
}

impl KernelDeformedDensity {
    /// Assembles a density whose normalizer was already computed on `rule`
    /// with the same error check [`normalize_kdeformed`] applies.
    pub(crate) fn from_parts(
        f_tilde: NaturalParam,
        alpha: AlphaParam,
        z: f64,
        a_alpha: f64,
        support: SupportSet,
        base: BaseDensity,
        rule: QuadratureRule,
    ) -> Self {
        KernelDeformedDensity {
            f_tilde,
            alpha,
            z,
            a_alpha,
            support,
            base,
            rule,
        }
    }

    pub fn f_tilde(&self) -> &NaturalParam {
        &self.f_tilde
    }

    pub fn alpha(&self) -> &AlphaParam {
        &self.alpha
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// The deformed log-normalizer `A_α = log_α Z`.
    pub fn a_alpha(&self) -> f64 {
        self.a_alpha
    }

    pub fn support(&self) -> &SupportSet {
        &self.support
    }

    pub fn base(&self) -> &BaseDensity {
        &self.base
    }

    /// The support-split quadrature rule the density was normalized on.
    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Density w.r.t. Q: exactly zero outside the support set.
    pub fn pdf_q(&self, t: f64) -> f64 {
        if !self.support.contains(t) {
            return 0.0;
        }
        beta_exp(self.f_tilde.eval(t), self.alpha.beta()) / self.z
    }

    /// Unnormalized density `exp_{2-α}(f̃(t))`.
    pub fn unnormalized(&self, t: f64) -> f64 {
        if !self.support.contains(t) {
            return 0.0;
        }
        beta_exp(self.f_tilde.eval(t), self.alpha.beta())
    }
}

/// Builds the normalized deformed density `(1/Z) exp_{2-α}(f̃)`.
///
/// The support of `exp_{2-α}(f̃)` is located first and the quadrature panels
/// are split at its boundaries, so the kink the clamp introduces always lands
/// on a panel edge.
pub fn normalize_kdeformed(
    f_tilde: NaturalParam,
    alpha: AlphaParam,
    base: &BaseDensity,
    rule: &QuadratureRule,
) -> Result<KernelDeformedDensity> {
    let support = find_support(|t| f_tilde.eval(t), &alpha, rule);
    if support.is_empty() {
        return Err(Error::degenerate(
            "exp_{2-alpha}(f~) vanishes on the whole domain",
        ));
    }
    let split = rule.with_breakpoints(&support.interior_breakpoints(rule.domain()))?;
    let beta = alpha.beta();
    let unnormalized = |t: f64| {
        if support.contains(t) {
            beta_exp(f_tilde.eval(t), beta)
        } else {
            0.0
        }
    };
    let (integral, used_rule) = integrate_refined(unnormalized, &split)?;
    let z = integral.value;
    if !z.is_finite() {
        return Err(Error::numeric(format!("deformed normalizer Z = {z}")));
    }
    if z < 1e-300 {
        return Err(Error::degenerate(format!(
            "deformed normalizer Z = {z} is numerically zero"
        )));
    }
    if !integral.converged {
        return Err(Error::numeric(
            "quadrature refinement cap reached while normalizing exp_{2-alpha}(f~)",
        ));
    }
    let a_alpha = beta_log(z, alpha.alpha())?;
    Ok(KernelDeformedDensity {
        f_tilde,
        alpha,
        z,
        a_alpha,
        support,
        base: base.clone(),
        rule: used_rule,
    })
}

/// Max residual over the grid of the deformed log-normalizer identity
/// `(1/Z) exp_{2-α}(Z^{α-1} f) = exp_{2-α}(f - log_α Z)`, both sides
/// evaluated independently.
pub fn verify_lemma1(f_values: &[f64], z: f64, alpha: &AlphaParam) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::invalid(format!("Z must be positive, got {z}")));
    }
    let beta = alpha.beta();
    let a = alpha.alpha();
    let log_alpha_z = beta_log(z, a)?;
    let scale = z.powf(a - 1.0);
    let mut max_residual = 0.0f64;
    for &f in f_values {
        let lhs = beta_exp(scale * f, beta) / z;
        let rhs = beta_exp(f - log_alpha_z, beta);
        max_residual = max_residual.max((lhs - rhs).abs());
    }
    Ok(max_residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::build_rule;
    use crate::rkhs::{Kernel, RkhsFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform01() -> BaseDensity {
        BaseDensity::uniform(0.0, 1.0).unwrap()
    }

    #[test]
    fn zero_natural_parameter_gives_the_base_density() {
        let base = uniform01();
        let rule = build_rule(&base, 8, 8).unwrap();
        let d = normalize_kexp(NaturalParam::constant(0.0), &base, &rule).unwrap();
        assert!(d.log_normalizer().abs() < 1e-10);
        assert!((d.pdf_q(0.37) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_natural_parameter_shifts_the_log_normalizer() {
        let base = uniform01();
        let rule = build_rule(&base, 8, 8).unwrap();
        let d = normalize_kexp(NaturalParam::constant(2.5), &base, &rule).unwrap();
        assert!((d.log_normalizer() - 2.5).abs() < 1e-10);
        assert!((d.pdf_q(0.2) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_parameter_over_gaussian_base_tilts_to_shifted_gaussian() {
        // f(t) = t against N(0,1): A = 1/2 by the Gaussian mgf, and the
        // Lebesgue density is the N(1,1) pdf.
        let base = BaseDensity::gaussian(0.0, 1.0).unwrap();
        let rule = build_rule(&base, 32, 12).unwrap();
        let d = normalize_kexp(NaturalParam::poly(vec![0.0, 1.0]), &base, &rule).unwrap();
        assert!((d.log_normalizer() - 0.5).abs() < 1e-9, "A = {}", d.log_normalizer());
        for t in [-1.0, 0.0, 0.8, 2.0] {
            let lebesgue = d.pdf_q(t) * base.q0(t);
            let shifted = BaseDensity::gaussian(1.0, 1.0).unwrap().q0(t);
            assert!((lebesgue - shifted).abs() < 1e-9, "at {t}: {lebesgue} vs {shifted}");
        }
    }

    #[test]
    fn deformed_zero_parameter_is_the_base_density() {
        let base = uniform01();
        let rule = build_rule(&base, 8, 8).unwrap();
        for alpha in [1.3, 1.7, 2.0] {
            let alpha = AlphaParam::new(alpha).unwrap();
            let d = normalize_kdeformed(NaturalParam::constant(0.0), alpha, &base, &rule).unwrap();
            assert!((d.z() - 1.0).abs() < 1e-10);
            assert!(d.a_alpha().abs() < 1e-10);
            assert!((d.pdf_q(0.6) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn truncated_parabola_normalizer_matches_antiderivative_oracle() {
        // f̃ = 2 - t² on Uniform(-2, 2), α = 2: support ±√3 and
        // Z = (1/4)∫(3 - t²) dt over the support = √3.
        let base = BaseDensity::uniform(-2.0, 2.0).unwrap();
        let rule = build_rule(&base, 16, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let d = normalize_kdeformed(NaturalParam::poly(vec![2.0, 0.0, -1.0]), alpha, &base, &rule)
            .unwrap();
        let root = 3.0f64.sqrt();
        let intervals = d.support().intervals();
        assert_eq!(intervals.len(), 1);
        assert!((intervals[0].0 + root).abs() < 1e-9);
        assert!((intervals[0].1 - root).abs() < 1e-9);
        assert!((d.z() - root).abs() < 1e-9, "Z = {}", d.z());
        // Density at the apex w.r.t. Lebesgue: 3/(4√3).
        let apex = d.pdf_q(0.0) * base.q0(0.0);
        assert!((apex - 3.0 / (4.0 * root)).abs() < 1e-9, "apex {apex}");
        // Exactly zero outside the support.
        assert_eq!(d.pdf_q(1.9), 0.0);
        assert_eq!(d.pdf_q(-1.8), 0.0);
    }

    #[test]
    fn alpha_two_density_matches_piecewise_closed_form() {
        let base = BaseDensity::uniform(-2.0, 2.0).unwrap();
        let rule = build_rule(&base, 16, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let d = normalize_kdeformed(NaturalParam::poly(vec![2.0, 0.0, -1.0]), alpha, &base, &rule)
            .unwrap();
        let root = 3.0f64.sqrt();
        for i in 0..200 {
            let t = -2.0 + 4.0 * (i as f64 + 0.5) / 200.0;
            let closed = if t.abs() < root { (3.0 - t * t) / root } else { 0.0 };
            assert!(
                (d.pdf_q(t) - closed).abs() < 1e-8,
                "mismatch at {t}: {} vs {closed}",
                d.pdf_q(t)
            );
        }
    }

    #[test]
    fn bimodal_parameter_yields_two_support_islands() {
        let base = uniform01();
        let rule = build_rule(&base, 16, 8).unwrap();
        let kernel = Kernel::gaussian_rbf(0.05).unwrap();
        let f = RkhsFunction::new(vec![5.0, 5.0], vec![0.2, 0.8], kernel).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let d = normalize_kdeformed(
            NaturalParam::rkhs_with_offset(f.clone(), -3.0),
            alpha,
            &base,
            &rule,
        )
        .unwrap();
        assert_eq!(d.support().intervals().len(), 2, "{:?}", d.support());
        // Grid oracle: membership must match the sign of 1 + f̃ on 10⁴ points.
        for i in 0..10_000 {
            let t = (i as f64 + 0.5) / 10_000.0;
            let inside = 1.0 + f.eval(t) - 3.0 > 0.0;
            assert_eq!(d.support().contains(t), inside, "at t = {t}");
            if !inside {
                assert_eq!(d.pdf_q(t), 0.0);
            }
        }
    }

    #[test]
    fn empty_support_is_a_degenerate_density_error() {
        let base = uniform01();
        let rule = build_rule(&base, 8, 8).unwrap();
        let alpha = AlphaParam::new(2.0).unwrap();
        let err = normalize_kdeformed(NaturalParam::constant(-5.0), alpha, &base, &rule);
        assert!(matches!(err, Err(Error::DegenerateDensity(_))));
    }

    #[test]
    fn lemma1_residual_is_zero_at_unit_z() {
        let alpha = AlphaParam::new(1.5).unwrap();
        let fs: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.3).collect();
        let r = verify_lemma1(&fs, 1.0, &alpha).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn lemma1_residual_small_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fs: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alpha = AlphaParam::new(1.5).unwrap();
        let r = verify_lemma1(&fs, 2.7, &alpha).unwrap();
        assert!(r < 1e-12, "residual {r}");
    }

    #[test]
    fn lemma1_alpha_two_crosscheck() {
        // α = 2, Z = 0.5, f ≡ 4: both closed forms evaluated independently.
        let alpha = AlphaParam::new(2.0).unwrap();
        let r = verify_lemma1(&[4.0], 0.5, &alpha).unwrap();
        assert!(r < 1e-12, "residual {r}");
        let lhs = beta_exp(0.5f64.powf(1.0) * 4.0, 0.0) / 0.5;
        let rhs = beta_exp(4.0 - beta_log(0.5, 2.0).unwrap(), 0.0);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lemma1_rejects_nonpositive_z() {
        let alpha = AlphaParam::new(1.5).unwrap();
        assert!(verify_lemma1(&[1.0], 0.0, &alpha).is_err());
        assert!(verify_lemma1(&[1.0], -2.0, &alpha).is_err());
    }

    #[test]
    fn scaling_invariance_between_lemma1_route_and_direct_route() {
        // p built from f̃ agrees pointwise with exp_{2-α}(f - A_α) where
        // f = f̃ / Z^{α-1} and A_α = log_α Z.
        let base = uniform01();
        let rule = build_rule(&base, 16, 8).unwrap();
        let kernel = Kernel::gaussian_rbf(0.15).unwrap();
        let f = RkhsFunction::new(vec![2.0, -1.0, 1.5], vec![0.2, 0.5, 0.8], kernel).unwrap();
        for a in [1.3, 1.6, 2.0] {
            let alpha = AlphaParam::new(a).unwrap();
            let d = normalize_kdeformed(NaturalParam::rkhs(f.clone()), alpha, &base, &rule).unwrap();
            let scale = d.z().powf(a - 1.0);
            for i in 0..500 {
                let t = (i as f64 + 0.5) / 500.0;
                let direct = beta_exp(f.eval(t) / scale - d.a_alpha(), alpha.beta());
                let via_z = d.pdf_q(t);
                // Outside the support both are clamped to zero.
                assert!(
                    (direct - via_z).abs() < 1e-10,
                    "alpha {a}, t {t}: {direct} vs {via_z}"
                );
            }
        }
    }

    #[test]
    fn random_rkhs_densities_integrate_to_one() {
        let base = uniform01();
        let rule = build_rule(&base, 24, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let kernel = Kernel::gaussian_rbf(rng.gen_range(0.05..0.2)).unwrap();
            let points: Vec<f64> = (0..6).map(|i| (i as f64 + 0.5) / 6.0).collect();
            let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = RkhsFunction::new(coeffs, points, kernel).unwrap();
            let d = normalize_kexp(NaturalParam::rkhs(f), &base, &rule).unwrap();
            let mass = d.rule().sum_with(&|t| d.pdf_q(t)).unwrap();
            assert!((mass - 1.0).abs() < 1e-8, "trial {trial}: mass {mass}");
        }
    }
}
