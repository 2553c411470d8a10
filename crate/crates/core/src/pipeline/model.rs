//! The demo model: encoder, attention heads and classifier, plus JSON
//! persistence.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DensityFamily, HeadParams};
use crate::error::{Error, Result};
use crate::pipeline::{RunConfig, OBSERVATION_WINDOW};

/// The encoder reads the value-function interpolation at this many fixed
/// grid points over the observation window.
pub const ENCODER_GRID_POINTS: usize = 32;
pub const ENCODER_HIDDEN: usize = 64;
/// Dimension of the representation `v` fed to the attention heads.
pub const REPRESENTATION_DIM: usize = 32;

/// Single-hidden-layer feedforward encoder: `v = W2·relu(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl EncoderParams {
    pub fn forward(&self, x: &DVector<f64>) -> EncoderTrace {
        let pre = &self.w1 * x + &self.b1;
        let hidden = pre.map(|z| z.max(0.0));
        let v = &self.w2 * &hidden + &self.b2;
        EncoderTrace {
            x: x.clone(),
            pre,
            hidden,
            v,
        }
    }

    /// Backprop from `d_v`; returns parameter gradients.
    pub fn backward(&self, trace: &EncoderTrace, d_v: &DVector<f64>) -> EncoderGradient {
        let d_hidden_raw = self.w2.transpose() * d_v;
        let d_pre = DVector::from_fn(d_hidden_raw.len(), |i, _| {
            if trace.pre[i] > 0.0 {
                d_hidden_raw[i]
            } else {
                0.0
            }
        });
        EncoderGradient {
            d_w1: &d_pre * trace.x.transpose(),
            d_b1: d_pre,
            d_w2: d_v * trace.hidden.transpose(),
            d_b2: d_v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub x: DVector<f64>,
    pub pre: DVector<f64>,
    pub hidden: DVector<f64>,
    pub v: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderGradient {
    pub d_w1: DMatrix<f64>,
    pub d_b1: DVector<f64>,
    pub d_w2: DMatrix<f64>,
    pub d_b2: DVector<f64>,
}

/// Linear-softmax classifier over the concatenated context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ClassifierParams {
    pub fn logits(&self, context: &DVector<f64>) -> DVector<f64> {
        &self.w * context + &self.b
    }
}

/// Softmax probabilities from logits.
pub fn softmax_probs(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exps: DVector<f64> = logits.map(|z| (z - max).exp());
    let total = exps.sum();
    exps / total
}

/// The trainable demo model. The value function is not part of the model:
/// it is refit per input sequence by ridge regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoModel {
    pub config: RunConfig,
    pub inducing_points: Vec<f64>,
    pub encoder: EncoderParams,
    pub heads: Vec<HeadParams>,
    pub classifier: ClassifierParams,
}

fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn uniform_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

fn init_head(family: DensityFamily, config: &AttentionConfig, rng: &mut ChaCha8Rng) -> HeadParams {
    let v_len = REPRESENTATION_DIM;
    let scale = 1.0 / (v_len as f64).sqrt();
    match family {
        DensityFamily::KernelSoftmax | DensityFamily::KernelDeformed => HeadParams::Kernel {
            w: uniform_matrix(config.inducing_points.len(), v_len, scale, rng),
        },
        DensityFamily::CtsSoftmax | DensityFamily::CtsSparsemax => HeadParams::Unimodal {
            w_mu: uniform_vector(v_len, scale, rng),
            w_sigma: uniform_vector(v_len, scale, rng),
        },
        DensityFamily::GaussianMixture => HeadParams::Mixture {
            w_pi: uniform_matrix(config.mixture_components, v_len, scale, rng),
            w_mu: uniform_matrix(config.mixture_components, v_len, scale, rng),
            w_sigma: uniform_matrix(config.mixture_components, v_len, scale, rng),
        },
    }
}

impl DemoModel {
    /// Fresh model with seeded uniform fan-in-scaled initialization.
    pub fn init(config: &RunConfig, classes: usize, obs_dims: usize) -> Result<Self> {
        let attn = config.attention_config()?;
        // Separate stream from data generation: offset the seed.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
        let x_len = ENCODER_GRID_POINTS * obs_dims;
        let encoder = EncoderParams {
            w1: uniform_matrix(ENCODER_HIDDEN, x_len, 1.0 / (x_len as f64).sqrt(), &mut rng),
            b1: DVector::zeros(ENCODER_HIDDEN),
            w2: uniform_matrix(
                REPRESENTATION_DIM,
                ENCODER_HIDDEN,
                1.0 / (ENCODER_HIDDEN as f64).sqrt(),
                &mut rng,
            ),
            b2: DVector::zeros(REPRESENTATION_DIM),
        };
        let heads = (0..config.heads)
            .map(|_| init_head(config.density_family, &attn, &mut rng))
            .collect();
        let context_len = config.heads * obs_dims;
        let classifier = ClassifierParams {
            w: uniform_matrix(classes, context_len, 1.0 / (context_len as f64).sqrt(), &mut rng),
            b: DVector::zeros(classes),
        };
        Ok(DemoModel {
            config: config.clone(),
            inducing_points: attn.inducing_points.clone(),
            encoder,
            heads,
            classifier,
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.b.len()
    }

    /// The fixed grid the encoder reads the interpolated series at.
    pub fn encoder_grid() -> Vec<f64> {
        let (lo, hi) = OBSERVATION_WINDOW;
        (0..ENCODER_GRID_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (ENCODER_GRID_POINTS - 1) as f64)
            .collect()
    }
}

pub fn save_model(model: &DemoModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DemoModel> {
    let text = std::fs::read_to_string(path)?;
    let model: DemoModel =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    model.config.validate()?;
    Ok(model)
}
