//! End-to-end demo pipeline: configuration, synthetic data, training loop,
//! density export and model persistence.
//!
//! The architecture is encoder → attention → classifier. The value function
//! interpolates each irregularly sampled series by ridge regression; the
//! encoder reads that interpolation at a fixed grid and emits the input
//! representation `v`; the attention block turns `v` into densities and the
//! context `c`; a linear-softmax classifier consumes `c`. Training is plain
//! SGD with deterministic batch order per seed.

mod model;
mod synthetic;
mod train;

pub use model::{
    load_model, save_model, ClassifierParams, DemoModel, EncoderParams, ENCODER_GRID_POINTS,
    ENCODER_HIDDEN, REPRESENTATION_DIM,
};
pub use synthetic::{generate_synthetic, LabeledSeries, SyntheticDataset, SIGNAL_WINDOWS};
pub use train::{
    evaluate_split, export_density, export_density_to_file, run_gradcheck, train_demo,
    EpochMetrics, Metrics, SplitMetrics, TrainedDemo,
};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DensityFamily};
use crate::deformed_math::AlphaParam;
use crate::densities::BaseDensity;
use crate::error::{Error, Result};
use crate::quadrature::build_rule;
use crate::rkhs::{default_inducing_points, Kernel};
use crate::value_function::BasisSet;

/// All experiment knobs. Unknown keys in a config file are rejected; every
/// field has a documented default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub density_family: DensityFamily,
    /// Entropic index for the kernel-deformed family (2 = kernel sparsemax).
    pub alpha: f64,
    pub heads: usize,
    pub inducing_points: usize,
    pub bandwidth: f64,
    pub basis_functions: usize,
    pub ridge_lambda: f64,
    /// Base measure; `null` picks the family default (uniform over the
    /// observation window for sparse families, a wide Gaussian for dense).
    pub base: Option<BaseDensity>,
    pub quadrature_panels: usize,
    pub nodes_per_panel: usize,
    pub mixture_components: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variance_floor: f64,
    /// Global gradient-norm clip applied to each averaged mini-batch update.
    pub grad_clip: f64,
    /// L2 decay on the head emitters; keeps densities from sharpening past
    /// the quadrature resolution once the task is solved.
    pub weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            density_family: DensityFamily::KernelDeformed,
            alpha: 2.0,
            heads: 8,
            inducing_points: 16,
            bandwidth: 0.05,
            basis_functions: 32,
            ridge_lambda: 1e-4,
            base: None,
            quadrature_panels: 64,
            nodes_per_panel: 10,
            mixture_components: 4,
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            variance_floor: 1e-6,
            grad_clip: 2.0,
            weight_decay: 1e-3,
        }
    }
}

/// The observation window all synthetic series live on.
pub const OBSERVATION_WINDOW: (f64, f64) = (0.0, 1.0);

impl RunConfig {
    pub fn for_family(family: DensityFamily) -> Self {
        RunConfig {
            density_family: family,
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(Error::invalid(format!("alpha must be in (1, 2], got {}", self.alpha)));
        }
        if self.heads == 0 || self.inducing_points == 0 || self.basis_functions == 0 {
            return Err(Error::invalid("heads, inducing_points and basis_functions must be >= 1"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::invalid("ridge_lambda must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.mixture_components == 0 {
            return Err(Error::invalid("mixture_components must be >= 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if let Some(base) = &self.base {
            base.validate()?;
        }
        Ok(())
    }

    /// The configured base, or the family default: uniform over the
    /// observation window for the sparse families, a wide Gaussian centered
    /// on the window for the dense ones.
    pub fn resolved_base(&self) -> BaseDensity {
        if let Some(base) = &self.base {
            return base.clone();
        }
        let (lo, hi) = OBSERVATION_WINDOW;
        if self.density_family.is_sparse() {
            BaseDensity::uniform(lo, hi).expect("window is nondegenerate")
        } else {
            let mid = 0.5 * (lo + hi);
            BaseDensity::gaussian(mid, 0.25 * (hi - lo)).expect("window is nondegenerate")
        }
    }

    /// Assembles the static attention configuration.
    pub fn attention_config(&self) -> Result<AttentionConfig> {
        self.validate()?;
        let base = self.resolved_base();
        let rule = build_rule(&base, self.quadrature_panels, self.nodes_per_panel)?;
        Ok(AttentionConfig {
            family: self.density_family,
            alpha: AlphaParam::new(self.alpha)?,
            inducing_points: default_inducing_points(OBSERVATION_WINDOW, self.inducing_points),
            kernel: Kernel::gaussian_rbf(self.bandwidth)?,
            base,
            rule,
            mixture_components: self.mixture_components,
            variance_floor: self.variance_floor,
        })
    }

    /// The value-function basis over the observation window.
    pub fn basis(&self) -> Result<BasisSet> {
        BasisSet::uniform(OBSERVATION_WINDOW, self.basis_functions)
    }
}
