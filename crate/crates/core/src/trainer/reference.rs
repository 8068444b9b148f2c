use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Diagonal Gaussian reference measure `p₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeasure {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub inflation: f64,
}

impl ReferenceMeasure {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::ShapeMismatch("mean and variance lengths differ".into()));
        }
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::DegenerateData("reference variance must be positive".into()));
        }
        Ok(Self {
            mean,
            variance,
            inflation: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * PI * v).ln()))
            .sum()
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| -(x - m) / v)
            .collect())
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = self.mean[j] + self.variance[j].sqrt() * z;
            }
        }
        out
    }
}

/// Gaussian with the data mean and `inflation` times the per-coordinate
/// population variance.
pub fn make_reference(samples: ArrayView2<f64>, inflation: f64) -> Result<ReferenceMeasure> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::DegenerateData("no data for the reference measure".into()));
    }
    if !(inflation > 0.0) {
        return Err(Error::InvalidConfig("inflation must be positive".into()));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let mut variance = Vec::with_capacity(mean.len());
    for (j, col) in samples.axis_iter(Axis(1)).enumerate() {
        let v = col.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / n as f64;
        if !(v > 0.0) {
            return Err(Error::DegenerateData(format!("coordinate {j} has zero variance")));
        }
        variance.push(v * inflation);
    }
    let mut r = ReferenceMeasure::new(mean, variance)?;
    r.inflation = inflation;
    Ok(r)
}
