//! Central finite-difference validation of the hand-derived adjoints.
//!
//! The probe loss is `L = ½‖c - target‖²`, so `∂L/∂c = c - target` feeds the
//! analytic backward pass directly. Probes on sparse (deformed) densities are
//! only trusted when the support set is structurally identical at `θ ± step`:
//! if an interval appears, disappears, or an endpoint jumps, the loss has a
//! kink inside the stencil and the probe is skipped and reported instead of
//! failed.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::value_function::{BasisSet, ValueParams};

use super::{backward, forward_context, AttentionConfig, HeadParams};

/// Which parameter blocks to probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeBlock {
    ValueMatrix,
    Input,
    Heads,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter location of the worst relative error.
    pub worst: String,
    pub checked: usize,
    /// Probes skipped because the FD step changed a sparse support set.
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug)]
enum Probe {
    B(usize, usize),
    V(usize),
    KernelW { head: usize, row: usize, col: usize },
    KernelGamma { head: usize, idx: usize },
    UnimodalMu { head: usize, idx: usize },
    UnimodalSigma { head: usize, idx: usize },
    MixturePi { head: usize, row: usize, col: usize },
    MixtureMu { head: usize, row: usize, col: usize },
    MixtureSigma { head: usize, row: usize, col: usize },
}

impl Probe {
    fn describe(&self) -> String {
        match self {
            Probe::B(r, c) => format!("B[{r},{c}]"),
            Probe::V(i) => format!("v[{i}]"),
            Probe::KernelW { head, row, col } => format!("head{head}.W[{row},{col}]"),
            Probe::KernelGamma { head, idx } => format!("head{head}.gamma[{idx}]"),
            Probe::UnimodalMu { head, idx } => format!("head{head}.w_mu[{idx}]"),
            Probe::UnimodalSigma { head, idx } => format!("head{head}.w_sigma[{idx}]"),
            Probe::MixturePi { head, row, col } => format!("head{head}.W_pi[{row},{col}]"),
            Probe::MixtureMu { head, row, col } => format!("head{head}.W_mu[{row},{col}]"),
            Probe::MixtureSigma { head, row, col } => format!("head{head}.W_sigma[{row},{col}]"),
        }
    }

    fn touches_density(&self) -> bool {
        !matches!(self, Probe::B(_, _))
    }

    fn apply(
        &self,
        delta: f64,
        heads: &[HeadParams],
        v: &DVector<f64>,
        b: &ValueParams,
    ) -> (Vec<HeadParams>, DVector<f64>, ValueParams) {
        let mut heads = heads.to_vec();
        let mut v = v.clone();
        let mut bm = b.matrix().clone();
        match *self {
            Probe::B(r, c) => bm[(r, c)] += delta,
            Probe::V(i) => v[i] += delta,
            Probe::KernelW { head, row, col } => {
                if let HeadParams::Kernel { w } = &mut heads[head] {
                    w[(row, col)] += delta;
                }
            }
            Probe::KernelGamma { head, idx } => {
                // γ̃ = W v, so a rank-one row update W_idx += δ vᵀ/(vᵀv)
                // perturbs exactly γ̃_idx by δ.
                if let HeadParams::Kernel { w } = &mut heads[head] {
                    let vv = v.dot(&v);
                    for col in 0..w.ncols() {
                        w[(idx, col)] += delta * v[col] / vv;
                    }
                }
            }
            Probe::UnimodalMu { head, idx } => {
                if let HeadParams::Unimodal { w_mu, .. } = &mut heads[head] {
                    w_mu[idx] += delta;
                }
            }
            Probe::UnimodalSigma { head, idx } => {
                if let HeadParams::Unimodal { w_sigma, .. } = &mut heads[head] {
                    w_sigma[idx] += delta;
                }
            }
            Probe::MixturePi { head, row, col } => {
                if let HeadParams::Mixture { w_pi, .. } = &mut heads[head] {
                    w_pi[(row, col)] += delta;
                }
            }
            Probe::MixtureMu { head, row, col } => {
                if let HeadParams::Mixture { w_mu, .. } = &mut heads[head] {
                    w_mu[(row, col)] += delta;
                }
            }
            Probe::MixtureSigma { head, row, col } => {
                if let HeadParams::Mixture { w_sigma, .. } = &mut heads[head] {
                    w_sigma[(row, col)] += delta;
                }
            }
        }
        (heads, v, ValueParams::new(bm).expect("finite perturbation"))
    }
}

/// Supports of every sparse head, as plain interval lists.
type SupportSnapshot = Vec<Option<Vec<(f64, f64)>>>;

fn supports_match(a: &SupportSnapshot, b: &SupportSnapshot) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (None, None) => true,
        (Some(xi), Some(yi)) => {
            xi.len() == yi.len()
                && xi
                    .iter()
                    .zip(yi)
                    .all(|(p, q)| (p.0 - q.0).abs() < 1e-3 && (p.1 - q.1).abs() < 1e-3)
        }
        _ => false,
    })
}

/// Central-difference comparison of the analytic gradients, probing a
/// deterministic (seeded) sample of parameters in the requested blocks.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradcheck(
    v: &DVector<f64>,
    heads: &[HeadParams],
    value_params: &ValueParams,
    basis: &BasisSet,
    config: &AttentionConfig,
    target: &DVector<f64>,
    blocks: &[ProbeBlock],
    seed: u64,
    step: f64,
    max_probes_per_block: usize,
) -> Result<GradCheckReport> {
    let evaluate = |heads: &[HeadParams],
                    v: &DVector<f64>,
                    b: &ValueParams|
     -> Result<(f64, SupportSnapshot)> {
        let (c, cache) = forward_context(v, heads, b, basis, config, None)?;
        let diff = c.values() - target;
        let supports = cache
            .heads
            .iter()
            .map(|hc| hc.density.support().map(|s| s.intervals().to_vec()))
            .collect();
        Ok((0.5 * diff.dot(&diff), supports))
    };

    let (c0, cache) = forward_context(v, heads, value_params, basis, config, None)?;
    let upstream = c0.values() - target;
    let bundle = backward(heads, value_params, basis, config, &upstream, &cache)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<Probe> = Vec::new();
    let sample_matrix = |rows: usize,
                             cols: usize,
                             rng: &mut ChaCha8Rng,
                             make: &dyn Fn(usize, usize) -> Probe|
     -> Vec<Probe> {
        let mut all: Vec<(usize, usize)> =
            (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        all.shuffle(rng);
        all.truncate(max_probes_per_block);
        all.into_iter().map(|(r, c)| make(r, c)).collect()
    };

    for block in blocks {
        match block {
            ProbeBlock::ValueMatrix => {
                let bm = value_params.matrix();
                probes.extend(sample_matrix(bm.nrows(), bm.ncols(), &mut rng, &Probe::B));
            }
            ProbeBlock::Input => {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(max_probes_per_block);
                probes.extend(idx.into_iter().map(Probe::V));
            }
            ProbeBlock::Heads => {
                for (h, params) in heads.iter().enumerate() {
                    match params {
                        HeadParams::Kernel { w } => {
                            probes.extend(sample_matrix(w.nrows(), w.ncols(), &mut rng, &|row, col| {
                                Probe::KernelW { head: h, row, col }
                            }));
                            let mut idx: Vec<usize> = (0..w.nrows()).collect();
                            idx.shuffle(&mut rng);
                            idx.truncate(max_probes_per_block / 2 + 1);
                            probes.extend(
                                idx.into_iter().map(|i| Probe::KernelGamma { head: h, idx: i }),
                            );
                        }
                        HeadParams::Unimodal { w_mu, .. } => {
                            let mut idx: Vec<usize> = (0..w_mu.len()).collect();
                            idx.shuffle(&mut rng);
                            idx.truncate(max_probes_per_block);
                            for i in idx {
                                probes.push(Probe::UnimodalMu { head: h, idx: i });
                                probes.push(Probe::UnimodalSigma { head: h, idx: i });
                            }
                        }
                        HeadParams::Mixture { w_pi, .. } => {
                            probes.extend(sample_matrix(
                                w_pi.nrows(),
                                w_pi.ncols(),
                                &mut rng,
                                &|row, col| Probe::MixturePi { head: h, row, col },
                            ));
                            probes.extend(sample_matrix(
                                w_pi.nrows(),
                                w_pi.ncols(),
                                &mut rng,
                                &|row, col| Probe::MixtureMu { head: h, row, col },
                            ));
                            probes.extend(sample_matrix(
                                w_pi.nrows(),
                                w_pi.ncols(),
                                &mut rng,
                                &|row, col| Probe::MixtureSigma { head: h, row, col },
                            ));
                        }
                    }
                }
            }
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("none");
    let mut checked = 0usize;
    let mut skipped = Vec::new();

    for probe in &probes {
        let (hp, vp, bp) = probe.apply(step, heads, v, value_params);
        let (loss_plus, sup_plus) = evaluate(&hp, &vp, &bp)?;
        let (hm, vm, bm) = probe.apply(-step, heads, v, value_params);
        let (loss_minus, sup_minus) = evaluate(&hm, &vm, &bm)?;

        if probe.touches_density() && !supports_match(&sup_plus, &sup_minus) {
            skipped.push(probe.describe());
            continue;
        }

        let fd = (loss_plus - loss_minus) / (2.0 * step);
        let analytic = analytic_entry(probe, &bundle);
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-12);
        checked += 1;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = probe.describe();
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        skipped,
    })
}

fn analytic_entry(probe: &Probe, bundle: &super::GradientBundle) -> f64 {
    use super::HeadGradient;
    match *probe {
        Probe::B(r, c) => bundle.d_b[(r, c)],
        Probe::V(i) => bundle.d_v[i],
        Probe::KernelW { head, row, col } => match &bundle.heads[head] {
            HeadGradient::Kernel { d_w, .. } => d_w[(row, col)],
            _ => f64::NAN,
        },
        Probe::KernelGamma { head, idx } => match &bundle.heads[head] {
            HeadGradient::Kernel { d_gamma, .. } => d_gamma[idx],
            _ => f64::NAN,
        },
        Probe::UnimodalMu { head, idx } => match &bundle.heads[head] {
            HeadGradient::Unimodal { d_w_mu, .. } => d_w_mu[idx],
            _ => f64::NAN,
        },
        Probe::UnimodalSigma { head, idx } => match &bundle.heads[head] {
            HeadGradient::Unimodal { d_w_sigma, .. } => d_w_sigma[idx],
            _ => f64::NAN,
        },
        Probe::MixturePi { head, row, col } => match &bundle.heads[head] {
            HeadGradient::Mixture { d_w_pi, .. } => d_w_pi[(row, col)],
            _ => f64::NAN,
        },
        Probe::MixtureMu { head, row, col } => match &bundle.heads[head] {
            HeadGradient::Mixture { d_w_mu, .. } => d_w_mu[(row, col)],
            _ => f64::NAN,
        },
        Probe::MixtureSigma { head, row, col } => match &bundle.heads[head] {
            HeadGradient::Mixture { d_w_sigma, .. } => d_w_sigma[(row, col)],
            _ => f64::NAN,
        },
    }
}
