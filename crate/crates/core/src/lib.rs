//! Continuous attention mechanisms over 1-D location domains.
//!
//! Discrete attention weights a finite set of value vectors. The continuous
//! analogue replaces the weight vector with a probability density `p` over the
//! location domain and the value matrix with a function `V(t)`, so the context
//! becomes `c = E_{T~p}[V(T)]`. This crate implements five families of
//! attention densities together with the numerical machinery needed to
//! normalize them, take expectations against them, and differentiate through
//! them:
//!
//! * **kernel exponential** — `p ∝ exp(f)` with `f` an RKHS function
//!   `f(t) = Σ γᵢ k(t, tᵢ)`; dense support, multimodal.
//! * **kernel deformed exponential** — `p ∝ exp_{2-α}(f̃)` with the
//!   β-exponential in place of `exp`; sparse support over a union of
//!   disjoint intervals for `1 < α ≤ 2`.
//! * **continuous softmax** — a Gaussian density from a two-parameter
//!   exponential family (unimodal baseline).
//! * **continuous sparsemax** — a truncated parabola, the `α = 2` deformed
//!   density of a quadratic natural parameter (unimodal sparse baseline).
//! * **Gaussian mixture** — dense multimodal baseline, fit either by
//!   weighted EM or emitted by a network head.
//!
//! Normalizers have no closed form for the kernel families, so everything is
//! pushed through deterministic composite Gauss-Legendre quadrature
//! ([`quadrature`]), with the support of sparse densities detected up front
//! and the panel layout split at support boundaries. Gradients are
//! hand-derived adjoints ([`attention`]) validated by finite differences.
//!
//! The [`pipeline`] module wires the pieces into a small end-to-end
//! classification demo on synthetic irregularly sampled time series, driven
//! by the `cattn` CLI.

pub mod attention;
pub mod deformed_math;
pub mod densities;
pub mod error;
pub mod gmm_attention;
pub mod pipeline;
pub mod quadrature;
pub mod rkhs;
pub mod value_function;

pub use error::{Error, Result};
