use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rkhs::{Backend, InnerLoopConfig, StepSchedule};
use crate::sampler::SamplerArch;

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub batch: usize,
    pub tau0: f64,
    pub k0: f64,
    /// Restart the inner step schedule at every outer iteration.
    pub restart_schedule: bool,
    pub rho0: f64,
    /// `ρ_l = rho0 / (1 + l / rho_decay)`.
    pub rho_decay: f64,
    pub sampler_updates_per_f: usize,
    pub nu_updates_per_sampler: usize,
    pub clip_norm: f64,
    pub max_expansion_terms: usize,
    pub seed: u64,
    pub backend: Backend,
    /// Random feature count for the `random_feature` backend.
    pub r: usize,
    /// Squared kernel bandwidth; the median heuristic when absent.
    pub bandwidth_sq: Option<f64>,
    /// Multiplier on the data variance for the Gaussian reference measure.
    pub reference_inflation: f64,
    /// Restart `f` and `ν` from zero at every outer iteration.
    pub cold_start: bool,
    pub sampler: SamplerArch,
    /// Record the objective estimate every this many outer iterations (0: never).
    pub log_every: usize,
    pub log_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eta: 0.1,
            inner_iters: 5,
            outer_iters: 2000,
            batch: 64,
            tau0: 0.5,
            k0: 1.0e4,
            restart_schedule: false,
            rho0: 0.05,
            rho_decay: 1.0e4,
            sampler_updates_per_f: 5,
            nu_updates_per_sampler: 3,
            clip_norm: 5.0,
            max_expansion_terms: 400,
            seed: 0,
            backend: Backend::Expansion,
            r: 4096,
            bandwidth_sq: None,
            reference_inflation: 2.0,
            cold_start: false,
            sampler: SamplerArch::default(),
            log_every: 0,
            log_samples: 500,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lambda", self.lambda)?;
        positive("eta", self.eta)?;
        positive("tau0", self.tau0)?;
        positive("k0", self.k0)?;
        positive("rho0", self.rho0)?;
        positive("rho_decay", self.rho_decay)?;
        positive("clip_norm", self.clip_norm)?;
        positive("reference_inflation", self.reference_inflation)?;
        if let Some(b) = self.bandwidth_sq {
            positive("bandwidth_sq", b)?;
        }
        if self.eta * self.tau0 >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "eta * tau0 must be < 1, got {}",
                self.eta * self.tau0
            )));
        }
        for (name, v) in [
            ("inner_iters", self.inner_iters),
            ("batch", self.batch),
            ("sampler_updates_per_f", self.sampler_updates_per_f),
            ("nu_updates_per_sampler", self.nu_updates_per_sampler),
            ("max_expansion_terms", self.max_expansion_terms),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.backend == Backend::RandomFeature && self.r == 0 {
            return Err(Error::InvalidConfig("r must be >= 1".into()));
        }
        if self.max_expansion_terms < 2 {
            return Err(Error::InvalidConfig("max_expansion_terms must be >= 2".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            tau0: self.tau0,
            k0: self.k0,
        }
    }

    pub fn inner(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            iters: self.inner_iters,
            batch: self.batch,
            eta: self.eta,
            lambda: self.lambda,
            max_terms: match self.backend {
                Backend::Expansion => Some(self.max_expansion_terms),
                Backend::RandomFeature => None,
            },
        }
    }

    /// Outer step size `ρ_l`.
    pub fn rho(&self, l: usize) -> f64 {
        self.rho0 / (1.0 + l as f64 / self.rho_decay)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
