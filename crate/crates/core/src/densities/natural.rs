//! Natural parameters for (deformed) exponential family densities.

use crate::rkhs::RkhsFunction;

/// The function inside the (deformed) exponential.
///
/// The primary case is a kernel expansion over inducing points. Polynomial
/// parameters cover the unimodal baselines (a quadratic gives the truncated
/// parabola) and give tests a direct-function hook with exact closed forms.
#[derive(Clone, Debug, PartialEq)]
pub enum NaturalParam {
    /// `f(t) = Σᵢ γᵢ k(t, tᵢ) + offset`.
    Rkhs { f: RkhsFunction, offset: f64 },
    /// `f(t) = c₀ + c₁ t + c₂ t² + …`.
    Poly { coeffs: Vec<f64> },
}

impl NaturalParam {
    pub fn rkhs(f: RkhsFunction) -> Self {
        NaturalParam::Rkhs { f, offset: 0.0 }
    }

    pub fn rkhs_with_offset(f: RkhsFunction, offset: f64) -> Self {
        NaturalParam::Rkhs { f, offset }
    }

    pub fn poly(coeffs: Vec<f64>) -> Self {
        NaturalParam::Poly { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        NaturalParam::Poly { coeffs: vec![c] }
    }

    /// Quadratic `-(t - mu)² / (2 sigma²)` in polynomial form.
    pub fn centered_quadratic(mu: f64, sigma: f64) -> Self {
        let s2 = 2.0 * sigma * sigma;
        NaturalParam::Poly {
            coeffs: vec![-mu * mu / s2, 2.0 * mu / s2, -1.0 / s2],
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            NaturalParam::Rkhs { f, offset } => f.eval(t) + offset,
            NaturalParam::Poly { coeffs } => {
                // Horner evaluation.
                coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
            }
        }
    }

    /// The kernel expansion, when this parameter is one.
    pub fn as_rkhs(&self) -> Option<&RkhsFunction> {
        match self {
            NaturalParam::Rkhs { f, .. } => Some(f),
            NaturalParam::Poly { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rkhs::Kernel;

    #[test]
    fn poly_eval_uses_all_coefficients() {
        let p = NaturalParam::poly(vec![2.0, 0.0, -1.0]); // 2 - t²
        assert_eq!(p.eval(0.0), 2.0);
        assert_eq!(p.eval(1.0), 1.0);
        assert_eq!(p.eval(-2.0), -2.0);
    }

    #[test]
    fn centered_quadratic_matches_direct_formula() {
        let q = NaturalParam::centered_quadratic(0.5, 0.05);
        for t in [0.3, 0.5, 0.62] {
            let direct = -(t - 0.5f64).powi(2) / (2.0 * 0.05 * 0.05);
            assert!((q.eval(t) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn rkhs_offset_shifts_evaluation() {
        let k = Kernel::gaussian_rbf(0.1).unwrap();
        let f = RkhsFunction::new(vec![1.0], vec![0.5], k).unwrap();
        let raw = NaturalParam::rkhs(f.clone());
        let shifted = NaturalParam::rkhs_with_offset(f, -3.0);
        assert!((shifted.eval(0.5) - (raw.eval(0.5) - 3.0)).abs() < 1e-15);
    }
}
