//! Kernel exponential family fitted by score matching, with `f` restricted to
//! the span of first-derivative features `∂_j k(x_i, ·)`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelSpec;
use crate::trainer::ReferenceMeasure;

/// Largest `n·d` accepted by the dense solve.
pub const MAX_SYSTEM_SIZE: usize = 8000;

/// `∂_{a_j} ∂_{b_l} k(a, b)` with `u = a - b` and `k = k(a, b)`.
fn d1d1(u: &[f64], k: f64, s: f64, j: usize, l: usize) -> f64 {
    let delta = if j == l { 2.0 / s } else { 0.0 };
    k * (delta - 4.0 * u[j] * u[l] / (s * s))
}

/// `∂_{a_j} ∂²_{b_l} k(a, b)`.
fn d1d2(u: &[f64], k: f64, s: f64, j: usize, l: usize) -> f64 {
    let delta = if j == l { 8.0 * u[l] / (s * s) } else { 0.0 };
    k * (delta + 4.0 * u[j] / (s * s) - 8.0 * u[j] * u[l] * u[l] / (s * s * s))
}

/// The quadratic score-matching objective in coefficient space:
/// `J(β) = (λ²/2n) ‖Gβ‖² + λ βᵀh + (η/2) βᵀGβ`, where `G` is the Gram matrix
/// of derivative features.
#[derive(Clone, Debug)]
pub struct ScoreMatchingSystem {
    pub gram: DMatrix<f64>,
    pub h: DVector<f64>,
    pub n: usize,
    pub d: usize,
    pub eta: f64,
    pub lambda: f64,
}

impl ScoreMatchingSystem {
    pub fn assemble(
        points: ArrayView2<f64>,
        kernel: &KernelSpec,
        eta: f64,
        lambda: f64,
        base: &ReferenceMeasure,
    ) -> Result<Self> {
        let (n, d) = points.dim();
        check_dim(kernel.input_dim, d)?;
        check_dim(base.dim(), d)?;
        if n == 0 {
            return Err(Error::DegenerateData("score matching needs data".into()));
        }
        if n * d > MAX_SYSTEM_SIZE {
            return Err(Error::ResourceGuard(format!(
                "score matching system of size n*d = {} exceeds {MAX_SYSTEM_SIZE}",
                n * d
            )));
        }
        if !(eta > 0.0) || !(lambda > 0.0) {
            return Err(Error::InvalidConfig("eta and lambda must be positive".into()));
        }
        let s = kernel.bandwidth_sq;
        let nd = n * d;
        let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
        let scores: Vec<Vec<f64>> = rows
            .iter()
            .map(|x| base.grad_log_density(x))
            .collect::<Result<_>>()?;
        let mut gram = DMatrix::zeros(nd, nd);
        let mut h = DVector::zeros(nd);
        let mut u = vec![0.0; d];
        for i in 0..n {
            for m in 0..n {
                for (t, ut) in u.iter_mut().enumerate() {
                    *ut = rows[i][t] - rows[m][t];
                }
                let k = kernel.eval_unchecked(&rows[i], &rows[m]);
                for j in 0..d {
                    let mut hj = 0.0;
                    for l in 0..d {
                        let g = d1d1(&u, k, s, j, l);
                        gram[(i * d + j, m * d + l)] = g;
                        hj += g * scores[m][l] + d1d2(&u, k, s, j, l);
                    }
                    h[i * d + j] += hj;
                }
            }
        }
        h /= n as f64;
        Ok(Self { gram, h, n, d, eta, lambda })
    }

    /// Number of stored Gram entries.
    pub fn gram_entries(&self) -> usize {
        self.gram.len()
    }

    pub fn gram_bytes(&self) -> usize {
        self.gram_entries() * std::mem::size_of::<f64>()
    }

    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let gb = &self.gram * beta;
        self.lambda * self.lambda / (2.0 * self.n as f64) * gb.norm_squared()
            + self.lambda * beta.dot(&self.h)
            + 0.5 * self.eta * beta.dot(&gb)
    }

    /// Solves `((λ²/n) G² + η G + εI) β = -λ h`, with `ε` a relative jitter
    /// of `1e-10` of the mean diagonal.
    pub fn solve(&self) -> Result<DVector<f64>> {
        let mut a = &self.gram * &self.gram;
        a *= self.lambda * self.lambda / self.n as f64;
        a += self.eta * &self.gram;
        let jitter = 1e-10 * a.diagonal().mean().max(f64::MIN_POSITIVE);
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Solver("score-matching system is not positive definite".into()))?;
        let beta = chol.solve(&(-self.lambda * &self.h));
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("score-matching coefficients"));
        }
        Ok(beta)
    }
}

/// `p(x) ∝ p₀(x) exp(λ f(x))` with `f = Σ β_{ij} ∂_j k(x_i, ·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatchingModel {
    pub kernel: KernelSpec,
    /// Support points, row-major `n × d`.
    support: Vec<f64>,
    /// `β`, indexed `i·d + j`.
    pub coefficients: Vec<f64>,
    pub eta: f64,
    pub lambda: f64,
    pub base: ReferenceMeasure,
    /// Quadratic objective at the fitted coefficients.
    pub objective: Option<f64>,
}

/// Fits the score-matching estimator on all columns of `data`.
pub fn fit_score_matching(
    data: &Dataset,
    kernel: &KernelSpec,
    eta: f64,
    lambda: f64,
    base: &ReferenceMeasure,
) -> Result<ScoreMatchingModel> {
    let system = ScoreMatchingSystem::assemble(data.samples.view(), kernel, eta, lambda, base)?;
    let beta = system.solve()?;
    let objective = system.objective(&beta);
    ScoreMatchingModel::new(*kernel, data.samples.view(), beta.as_slice().to_vec(), eta, lambda, base.clone())
        .map(|m| ScoreMatchingModel { objective: Some(objective), ..m })
}

impl ScoreMatchingModel {
    pub fn new(
        kernel: KernelSpec,
        support: ArrayView2<f64>,
        coefficients: Vec<f64>,
        eta: f64,
        lambda: f64,
        base: ReferenceMeasure,
    ) -> Result<Self> {
        let (n, d) = support.dim();
        check_dim(kernel.input_dim, d)?;
        check_dim(base.dim(), d)?;
        check_dim(n * d, coefficients.len())?;
        Ok(Self {
            kernel,
            support: support.iter().copied().collect(),
            coefficients,
            eta,
            lambda,
            base,
            objective: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.kernel.input_dim
    }

    pub fn support(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_vec((self.support.len() / d, d), self.support.clone()).expect("consistent shape")
    }

    /// `f(x)` and `∇f(x)`.
    pub fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        check_dim(d, x.len())?;
        let s = self.kernel.bandwidth_sq;
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        let mut u = vec![0.0; d];
        for (xi, beta) in self.support.chunks_exact(d).zip(self.coefficients.chunks_exact(d)) {
            for t in 0..d {
                u[t] = xi[t] - x[t];
            }
            let k = self.kernel.eval_unchecked(xi, x);
            for j in 0..d {
                // ∂_{a_j} k(a, x) at a = x_i.
                value += beta[j] * (-2.0 * u[j] / s) * k;
                for (l, g) in grad.iter_mut().enumerate() {
                    *g += beta[j] * d1d1(&u, k, s, j, l);
                }
            }
        }
        Ok((value, grad))
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_grad(x)?.0)
    }

    /// `log p₀(x) + λ f(x)` and its gradient.
    pub fn log_density_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, gf) = self.value_grad(x)?;
        let lp = self.base.log_density(x)?;
        let gb = self.base.grad_log_density(x)?;
        Ok((
            lp + self.lambda * f,
            gb.iter().zip(&gf).map(|(b, g)| b + self.lambda * g).collect(),
        ))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_dim(m.support.len() / m.dim() * m.dim(), m.support.len())?;
        check_dim(m.support.len(), m.coefficients.len())?;
        Ok(m)
    }
}
