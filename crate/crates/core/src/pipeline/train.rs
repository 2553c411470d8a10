//! SGD training loop, evaluation metrics, density export and the CLI-facing
//! gradient check.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    backward, fd_gradcheck, forward_context, head_density, AttentionConfig, GradCheckReport,
    GradientBundle, HeadGradient, HeadParams, ProbeBlock, SharedNodeMatrices,
};
use crate::error::{Error, Result};
use crate::pipeline::model::{softmax_probs, DemoModel, EncoderGradient};
use crate::pipeline::{LabeledSeries, RunConfig, SyntheticDataset};
use crate::value_function::{fit_ridge, value_eval, BasisSet, TimeSeries, ValueParams};

/// Accuracy and macro-averaged F1 on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the untrained model; epochs count from 1.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    /// Samples whose sparse density degenerated to empty support and fell
    /// back to the base density during this epoch.
    pub degenerate_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: RunConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_train: SplitMetrics,
    pub final_test: SplitMetrics,
}

#[derive(Clone, Debug)]
pub struct TrainedDemo {
    pub model: DemoModel,
    pub metrics: Metrics,
}

/// Per-sequence precomputation: the ridge-fitted value function and the
/// encoder's fixed-grid view of it. Neither depends on model parameters.
struct Prepared {
    value_params: ValueParams,
    x: DVector<f64>,
    label: usize,
}

fn prepare_split(
    split: &[LabeledSeries],
    basis: &BasisSet,
    lambda: f64,
    grid: &[f64],
) -> Result<Vec<Prepared>> {
    split
        .par_iter()
        .map(|labeled| {
            let value_params = fit_ridge(&labeled.series, basis, lambda)?;
            let obs = value_params.obs_dims();
            let mut x = DVector::zeros(grid.len() * obs);
            for (g, &t) in grid.iter().enumerate() {
                let v = value_eval(&value_params, basis, t);
                for d in 0..obs {
                    x[g * obs + d] = v[d];
                }
            }
            Ok(Prepared {
                value_params,
                x,
                label: labeled.label,
            })
        })
        .collect()
}

struct SampleResult {
    loss: f64,
    fallback: bool,
    encoder: EncoderGradient,
    attention: GradientBundle,
    d_cls_w: DMatrix<f64>,
    d_cls_b: DVector<f64>,
}

/// Forward + backward for one sample. An empty-support sparse head makes the
/// loss locally undefined; the sample falls back to zero attention gradients
/// (the classifier and encoder still learn from the base-density context).
fn sample_pass(
    model: &DemoModel,
    prep: &Prepared,
    attn: &AttentionConfig,
    basis: &BasisSet,
    shared: &SharedNodeMatrices,
) -> Result<SampleResult> {
    let trace = model.encoder.forward(&prep.x);
    let forward = forward_context(&trace.v, &model.heads, &prep.value_params, basis, attn, Some(shared));
    let (context, cache, fallback) = match forward {
        Ok((c, cache)) => (c, Some(cache), false),
        Err(Error::DegenerateDensity(_)) => {
            // Base-density context: p ≡ 1 w.r.t. Q for every head.
            let ones = flat_base_context(model, prep, basis, attn)?;
            (ones, None, true)
        }
        Err(e) => return Err(e),
    };
    let logits = model.classifier.logits(context.values());
    let probs = softmax_probs(&logits);
    let loss = -probs[prep.label].max(1e-300).ln();

    let mut d_logits = probs;
    d_logits[prep.label] -= 1.0;
    let d_cls_w = &d_logits * context.values().transpose();
    let d_cls_b = d_logits.clone();
    let d_context = model.classifier.w.transpose() * &d_logits;

    let (encoder_grad, attention_grad) = match cache {
        Some(cache) => {
            let bundle = backward(&model.heads, &prep.value_params, basis, attn, &d_context, &cache)?;
            let enc = model.encoder.backward(&trace, &bundle.d_v);
            (enc, bundle)
        }
        None => {
            // Degenerate sample: context is constant in the attention
            // parameters, so the true gradient is zero. Pull the head
            // emitters gently toward the origin instead, which restores a
            // nonempty support (γ̃ = 0 is the base density) within a few
            // steps.
            let zero_v = DVector::zeros(trace.v.len());
            (
                model.encoder.backward(&trace, &zero_v),
                recovery_bundle(&model.heads, &prep.value_params, trace.v.len()),
            )
        }
    };

    Ok(SampleResult {
        loss,
        fallback,
        encoder: encoder_grad,
        attention: attention_grad,
        d_cls_w,
        d_cls_b,
    })
}

/// Context of the base density for every head: m = E_Q[Ψ].
fn flat_base_context(
    model: &DemoModel,
    prep: &Prepared,
    basis: &BasisSet,
    attn: &AttentionConfig,
) -> Result<crate::attention::ContextVector> {
    let rule = &attn.rule;
    let mut m = DVector::zeros(basis.len());
    for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
        for n in 0..basis.len() {
            m[n] += w * basis.eval_one(n, t);
        }
    }
    let c_h = prep.value_params.matrix() * m;
    let obs = prep.value_params.obs_dims();
    let mut values = DVector::zeros(model.heads.len() * obs);
    for h in 0..model.heads.len() {
        for d in 0..obs {
            values[h * obs + d] = c_h[d];
        }
    }
    // Reuse the public constructor path via forward on a zero-head model is
    // not possible here; build the vector directly.
    Ok(crate::attention::ContextVector::from_parts(
        values,
        model.heads.len(),
        obs,
    ))
}

/// Rate at which a degenerate (empty-support) sample pulls its head
/// parameters back toward the origin.
const RECOVERY_RATE: f64 = 0.1;

fn recovery_bundle(
    heads: &[HeadParams],
    value_params: &ValueParams,
    v_len: usize,
) -> GradientBundle {
    let mut bundle = zero_bundle(heads, value_params, v_len);
    for (params, grad) in heads.iter().zip(&mut bundle.heads) {
        match (params, grad) {
            (HeadParams::Kernel { w }, HeadGradient::Kernel { d_w, .. }) => {
                *d_w = w * RECOVERY_RATE;
            }
            (
                HeadParams::Unimodal { w_mu, w_sigma },
                HeadGradient::Unimodal { d_w_mu, d_w_sigma },
            ) => {
                *d_w_mu = w_mu * RECOVERY_RATE;
                *d_w_sigma = w_sigma * RECOVERY_RATE;
            }
            (
                HeadParams::Mixture { w_pi, w_mu, w_sigma },
                HeadGradient::Mixture { d_w_pi, d_w_mu, d_w_sigma },
            ) => {
                *d_w_pi = w_pi * RECOVERY_RATE;
                *d_w_mu = w_mu * RECOVERY_RATE;
                *d_w_sigma = w_sigma * RECOVERY_RATE;
            }
            _ => unreachable!("head kinds are fixed at init"),
        }
    }
    bundle
}

fn zero_bundle(heads: &[HeadParams], value_params: &ValueParams, v_len: usize) -> GradientBundle {
    let head_grads = heads
        .iter()
        .map(|params| match params {
            HeadParams::Kernel { w } => HeadGradient::Kernel {
                d_gamma: DVector::zeros(w.nrows()),
                d_w: DMatrix::zeros(w.nrows(), w.ncols()),
            },
            HeadParams::Unimodal { w_mu, w_sigma } => HeadGradient::Unimodal {
                d_w_mu: DVector::zeros(w_mu.len()),
                d_w_sigma: DVector::zeros(w_sigma.len()),
            },
            HeadParams::Mixture { w_pi, w_mu, w_sigma } => HeadGradient::Mixture {
                d_w_pi: DMatrix::zeros(w_pi.nrows(), w_pi.ncols()),
                d_w_mu: DMatrix::zeros(w_mu.nrows(), w_mu.ncols()),
                d_w_sigma: DMatrix::zeros(w_sigma.nrows(), w_sigma.ncols()),
            },
        })
        .collect();
    GradientBundle {
        heads: head_grads,
        d_b: DMatrix::zeros(value_params.obs_dims(), value_params.basis_len()),
        d_v: DVector::zeros(v_len),
    }
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn apply_update(model: &mut DemoModel, sample: &SampleResult, lr: f64, weight_decay: f64) {
    model.encoder.w1 -= lr * &sample.encoder.d_w1;
    model.encoder.b1 -= lr * &sample.encoder.d_b1;
    model.encoder.w2 -= lr * &sample.encoder.d_w2;
    model.encoder.b2 -= lr * &sample.encoder.d_b2;
    model.classifier.w -= lr * &sample.d_cls_w;
    model.classifier.b -= lr * &sample.d_cls_b;
    let shrink = 1.0 - lr * weight_decay;
    for (params, grad) in model.heads.iter_mut().zip(&sample.attention.heads) {
        match (params, grad) {
            (HeadParams::Kernel { w }, HeadGradient::Kernel { d_w, .. }) => {
                *w *= shrink;
                *w -= lr * d_w;
            }
            (
                HeadParams::Unimodal { w_mu, w_sigma },
                HeadGradient::Unimodal { d_w_mu, d_w_sigma },
            ) => {
                *w_mu *= shrink;
                *w_sigma *= shrink;
                *w_mu -= lr * d_w_mu;
                *w_sigma -= lr * d_w_sigma;
            }
            (
                HeadParams::Mixture { w_pi, w_mu, w_sigma },
                HeadGradient::Mixture { d_w_pi, d_w_mu, d_w_sigma },
            ) => {
                *w_pi *= shrink;
                *w_mu *= shrink;
                *w_sigma *= shrink;
                *w_pi -= lr * d_w_pi;
                *w_mu -= lr * d_w_mu;
                *w_sigma -= lr * d_w_sigma;
            }
            _ => unreachable!("head kinds are fixed at init"),
        }
    }
}

fn grad_norm(sample: &SampleResult) -> f64 {
    let mut total = sample.encoder.d_w1.norm_squared()
        + sample.encoder.d_b1.norm_squared()
        + sample.encoder.d_w2.norm_squared()
        + sample.encoder.d_b2.norm_squared()
        + sample.d_cls_w.norm_squared()
        + sample.d_cls_b.norm_squared();
    for grad in &sample.attention.heads {
        total += match grad {
            HeadGradient::Kernel { d_w, .. } => d_w.norm_squared(),
            HeadGradient::Unimodal { d_w_mu, d_w_sigma } => {
                d_w_mu.norm_squared() + d_w_sigma.norm_squared()
            }
            HeadGradient::Mixture { d_w_pi, d_w_mu, d_w_sigma } => {
                d_w_pi.norm_squared() + d_w_mu.norm_squared() + d_w_sigma.norm_squared()
            }
        };
    }
    total.sqrt()
}

fn accumulate_sample(acc: &mut SampleResult, other: &SampleResult) {
    acc.loss += other.loss;
    acc.encoder.d_w1 += &other.encoder.d_w1;
    acc.encoder.d_b1 += &other.encoder.d_b1;
    acc.encoder.d_w2 += &other.encoder.d_w2;
    acc.encoder.d_b2 += &other.encoder.d_b2;
    acc.d_cls_w += &other.d_cls_w;
    acc.d_cls_b += &other.d_cls_b;
    acc.attention.accumulate(&other.attention);
}

fn scale_sample(acc: &mut SampleResult, factor: f64) {
    acc.encoder.d_w1 *= factor;
    acc.encoder.d_b1 *= factor;
    acc.encoder.d_w2 *= factor;
    acc.encoder.d_b2 *= factor;
    acc.d_cls_w *= factor;
    acc.d_cls_b *= factor;
    acc.attention.scale(factor);
}

fn split_metrics(preds: &[usize], labels: &[usize], classes: usize) -> SplitMetrics {
    let mut correct = 0usize;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fne = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fne[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fne[c];
        f1_sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
    }
    SplitMetrics {
        accuracy: correct as f64 / preds.len().max(1) as f64,
        macro_f1: f1_sum / classes as f64,
    }
}

fn evaluate_prepared(
    model: &DemoModel,
    prepared: &[Prepared],
    attn: &AttentionConfig,
    basis: &BasisSet,
    shared: &SharedNodeMatrices,
    classes: usize,
) -> Result<SplitMetrics> {
    let preds: Result<Vec<usize>> = prepared
        .par_iter()
        .map(|prep| {
            let trace = model.encoder.forward(&prep.x);
            let context = match forward_context(
                &trace.v,
                &model.heads,
                &prep.value_params,
                basis,
                attn,
                Some(shared),
            ) {
                Ok((c, _)) => c,
                Err(Error::DegenerateDensity(_)) => flat_base_context(model, prep, basis, attn)?,
                Err(e) => return Err(e),
            };
            Ok(argmax(&model.classifier.logits(context.values())))
        })
        .collect();
    let preds = preds?;
    let labels: Vec<usize> = prepared.iter().map(|p| p.label).collect();
    Ok(split_metrics(&preds, &labels, classes))
}

/// Accuracy and macro-F1 of a model on a dataset split.
pub fn evaluate_split(
    model: &DemoModel,
    split: &[LabeledSeries],
    classes: usize,
) -> Result<SplitMetrics> {
    let attn = model.config.attention_config()?;
    let basis = model.config.basis()?;
    let shared = SharedNodeMatrices::new(&attn, &basis)?;
    let grid = DemoModel::encoder_grid();
    let prepared = prepare_split(split, &basis, model.config.ridge_lambda, &grid)?;
    evaluate_prepared(model, &prepared, &attn, &basis, &shared, classes)
}

/// Trains the demo classifier with plain SGD. Deterministic for identical
/// `(config, dataset)`: batch order, initialization and parallel reductions
/// are all fixed by the seed.
pub fn train_demo(config: &RunConfig, dataset: &SyntheticDataset) -> Result<TrainedDemo> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::invalid("dataset must have nonempty train and test splits"));
    }
    let obs_dims = dataset.train[0].series.obs_dims();
    let attn = config.attention_config()?;
    let basis = config.basis()?;
    let shared = SharedNodeMatrices::new(&attn, &basis)?;
    let grid = DemoModel::encoder_grid();
    let train_prep = prepare_split(&dataset.train, &basis, config.ridge_lambda, &grid)?;
    let test_prep = prepare_split(&dataset.test, &basis, config.ridge_lambda, &grid)?;

    let mut model = DemoModel::init(config, dataset.classes, obs_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x51ce_ca75));

    let mut epochs = Vec::with_capacity(config.epochs + 1);
    let initial_train = evaluate_prepared(&model, &train_prep, &attn, &basis, &shared, dataset.classes)?;
    let initial_test = evaluate_prepared(&model, &test_prep, &attn, &basis, &shared, dataset.classes)?;
    epochs.push(EpochMetrics {
        epoch: 0,
        mean_loss: f64::NAN,
        train: initial_train,
        test: initial_test,
        degenerate_fallbacks: 0,
    });

    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut fallbacks = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Result<Vec<SampleResult>> = batch
                .par_iter()
                .map(|&i| sample_pass(&model, &train_prep[i], &attn, &basis, &shared))
                .collect();
            let results = results?;
            let mut iter = results.into_iter();
            let mut total = iter.next().expect("batches are nonempty");
            let mut batch_fallbacks = total.fallback as usize;
            for sample in iter {
                batch_fallbacks += sample.fallback as usize;
                accumulate_sample(&mut total, &sample);
            }
            loss_sum += total.loss;
            fallbacks += batch_fallbacks;
            if !total.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            scale_sample(&mut total, 1.0 / batch.len() as f64);
            let norm = grad_norm(&total);
            if norm > config.grad_clip {
                scale_sample(&mut total, config.grad_clip / norm);
            }
            apply_update(&mut model, &total, config.learning_rate, config.weight_decay);
        }
        let train_metrics =
            evaluate_prepared(&model, &train_prep, &attn, &basis, &shared, dataset.classes)?;
        let test_metrics =
            evaluate_prepared(&model, &test_prep, &attn, &basis, &shared, dataset.classes)?;
        epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / train_prep.len() as f64,
            train: train_metrics,
            test: test_metrics,
            degenerate_fallbacks: fallbacks,
        });
    }

    let last = epochs.last().expect("at least the initial entry");
    let metrics = Metrics {
        config: config.clone(),
        epochs: epochs.clone(),
        final_train: last.train,
        final_test: last.test,
    };
    Ok(TrainedDemo { model, metrics })
}

/// Writes `t,pdf_q,pdf_lebesgue` rows of one head's attention density for an
/// input sequence over a uniform grid, with a trailing support sidecar line
/// for sparse families.
pub fn export_density(
    model: &DemoModel,
    head: usize,
    series: &TimeSeries,
    grid_points: usize,
) -> Result<String> {
    if head >= model.heads.len() {
        return Err(Error::invalid(format!(
            "head {head} out of range (model has {})",
            model.heads.len()
        )));
    }
    if grid_points < 2 {
        return Err(Error::invalid("need at least 2 grid points"));
    }
    let attn = model.config.attention_config()?;
    let basis = model.config.basis()?;
    let value_params = fit_ridge(series, &basis, model.config.ridge_lambda)?;
    let grid = DemoModel::encoder_grid();
    let obs = value_params.obs_dims();
    let mut x = DVector::zeros(grid.len() * obs);
    for (g, &t) in grid.iter().enumerate() {
        let v = value_eval(&value_params, &basis, t);
        for d in 0..obs {
            x[g * obs + d] = v[d];
        }
    }
    let trace = model.encoder.forward(&x);
    let density = head_density(&trace.v, &model.heads[head], &attn)?;

    let (lo, hi) = attn.base.domain();
    let mut out = String::from("t,pdf_q,pdf_lebesgue\n");
    for i in 0..grid_points {
        let t = lo + (hi - lo) * i as f64 / (grid_points - 1) as f64;
        out.push_str(&format!("{t},{},{}\n", density.pdf_q(t), density.pdf_lebesgue(t)));
    }
    if let Some(support) = density.support() {
        out.push_str("# support:");
        for &(a, b) in support.intervals() {
            out.push_str(&format!(" [{a},{b}]"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_density_to_file(
    model: &DemoModel,
    head: usize,
    series: &TimeSeries,
    grid_points: usize,
    path: &Path,
) -> Result<()> {
    let csv = export_density(model, head, series, grid_points)?;
    std::fs::write(path, csv)?;
    Ok(())
}

/// Builds a seeded model on synthetic data and runs the finite-difference
/// gradient check over every parameter block.
pub fn run_gradcheck(config: &RunConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    let dataset = generate_small(seed)?;
    let attn = config.attention_config()?;
    let basis = config.basis()?;
    let grid = DemoModel::encoder_grid();
    let prepared = prepare_split(&dataset.train, &basis, config.ridge_lambda, &grid)?;
    let model = DemoModel::init(config, dataset.classes, 1)?;
    let trace = model.encoder.forward(&prepared[0].x);
    let (c, _) = forward_context(
        &trace.v,
        &model.heads,
        &prepared[0].value_params,
        &basis,
        &attn,
        None,
    )?;
    let target = DVector::zeros(c.values().len());
    fd_gradcheck(
        &trace.v,
        &model.heads,
        &prepared[0].value_params,
        &basis,
        &attn,
        &target,
        &[ProbeBlock::ValueMatrix, ProbeBlock::Input, ProbeBlock::Heads],
        seed,
        step,
        6,
    )
}

fn generate_small(seed: u64) -> Result<SyntheticDataset> {
    crate::pipeline::generate_synthetic(seed, 3, 1, 1, 0.3)
}
