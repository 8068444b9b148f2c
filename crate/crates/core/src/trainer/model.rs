use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{check_dim, Error, Result};
use crate::rkhs::RkhsFunction;
use crate::sampler::TransportSampler;

use super::config::TrainConfig;
use super::reference::ReferenceMeasure;

/// How model inputs map into the kernel space of `f` and `ν`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Unconditional,
    /// `f(x, y)` lives on `z = (x / x_scale, y / y_scale)` with a unit
    /// bandwidth, which is the product kernel `k_x · k_y` with bandwidths
    /// `x_scale²` and `y_scale²`.
    Conditional {
        x_cols: Vec<usize>,
        y_cols: Vec<usize>,
        x_scale: f64,
        y_scale: f64,
    },
}

/// Counters kept during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub inner_refreshes: u64,
    pub sampler_updates: u64,
    pub extra_nu_steps: u64,
    pub peak_f_terms: usize,
    pub peak_nu_terms: usize,
    pub dropped_mass: f64,
    pub curve: Vec<CurvePoint>,
}

/// Training-curve entry, recorded every `log_every` outer iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Monte-Carlo estimate of the saddle objective.
    pub objective: f64,
    /// Unbiased squared MMD between sampler draws and the training data, in
    /// kernel space.
    pub mmd_to_train: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mode: Mode,
    pub f: RkhsFunction,
    pub nu: RkhsFunction,
    pub sampler: TransportSampler,
    pub base: ReferenceMeasure,
    pub config: TrainConfig,
    pub normalization: Option<Normalization>,
    pub stats: TrainStats,
}

impl TrainedModel {
    pub fn is_conditional(&self) -> bool {
        matches!(self.mode, Mode::Conditional { .. })
    }

    /// Dimension of the modelled variable (`y` in conditional mode).
    pub fn output_dim(&self) -> usize {
        self.sampler.output_dim()
    }

    /// Kernel-space point for `y` (given `x` in conditional mode).
    pub fn kernel_point(&self, x: Option<&[f64]>, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), y.len())?;
        match (&self.mode, x) {
            (Mode::Unconditional, None) => Ok(y.to_vec()),
            (Mode::Conditional { x_scale, y_scale, .. }, Some(x)) => {
                check_dim(self.sampler.cond_dim(), x.len())?;
                Ok(scaled(x, y, *x_scale, *y_scale))
            }
            _ => Err(Error::InvalidConfig(
                "conditioning input must be given exactly in conditional mode".into(),
            )),
        }
    }

    /// `log p₀(y) + λ f(·)`: the model log-density up to its log-partition.
    pub fn log_unnormalized(&self, x: Option<&[f64]>, y: &[f64]) -> Result<f64> {
        let z = self.kernel_point(x, y)?;
        Ok(self.base.log_density(y)? + self.config.lambda * self.f.eval(&z)?)
    }

    /// Gradient in `y` of [`Self::log_unnormalized`].
    pub fn grad_log_unnormalized(&self, x: Option<&[f64]>, y: &[f64]) -> Result<Vec<f64>> {
        let z = self.kernel_point(x, y)?;
        let gf = self.f.grad_x(&z)?;
        let gb = self.base.grad_log_density(y)?;
        let (off, s) = match &self.mode {
            Mode::Unconditional => (0, 1.0),
            Mode::Conditional { y_scale, .. } => (z.len() - y.len(), *y_scale),
        };
        Ok(gb
            .iter()
            .enumerate()
            .map(|(j, g)| g + self.config.lambda * gf[off + j] / s)
            .collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Array2<f64>> {
        self.sampler.sample(n)
    }

    pub fn sample_conditional(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.sampler.sample_conditional(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_dim(m.f.input_dim(), m.nu.input_dim())?;
        check_dim(m.base.dim(), m.output_dim())?;
        Ok(m)
    }
}

pub(crate) fn scaled(x: &[f64], y: &[f64], xs: f64, ys: f64) -> Vec<f64> {
    x.iter().map(|v| v / xs).chain(y.iter().map(|v| v / ys)).collect()
}
