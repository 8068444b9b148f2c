//! Sample-quality and likelihood metrics, plus brute-force duality oracles on
//! 1-d grids.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{median_bandwidth_with, KernelSpec, MEDIAN_SUBSAMPLE_CAP};
use crate::rng::substream;
use crate::trainer::{Mode, ReferenceMeasure, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub mmd_biased: f64,
    pub mmd_unbiased: f64,
    pub kernel: KernelSpec,
    pub n_x: usize,
    pub n_y: usize,
}

fn kernel_sum(kernel: &KernelSpec, a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let rows: Vec<&[f64]> = b.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    // Row sums in parallel, then a fixed-order total so results do not
    // depend on the thread count.
    let sums: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ra = a.row(i);
            let ra = ra.as_slice().expect("standard layout");
            rows.iter().map(|rb| kernel.eval_unchecked(ra, rb)).sum()
        })
        .collect();
    sums.iter().sum()
}

/// Squared MMD between two sample sets, as the biased V-statistic and the
/// unbiased U-statistic.
pub fn mmd(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &KernelSpec) -> Result<MmdReport> {
    check_dim(kernel.input_dim, x.ncols())?;
    check_dim(kernel.input_dim, y.ncols())?;
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::InvalidConfig("mmd needs at least 2 samples per set".into()));
    }
    let sxx = kernel_sum(kernel, x, x);
    let syy = kernel_sum(kernel, y, y);
    let sxy = kernel_sum(kernel, x, y);
    let (nf, mf) = (n as f64, m as f64);
    let biased = sxx / (nf * nf) + syy / (mf * mf) - 2.0 * (sxy / (nf * mf));
    // k(x, x) = 1 on the diagonal.
    let unbiased = (sxx - nf) / (nf * (nf - 1.0)) + (syy - mf) / (mf * (mf - 1.0)) - 2.0 * (sxy / (nf * mf));
    Ok(MmdReport {
        mmd_biased: biased.max(0.0),
        mmd_unbiased: unbiased,
        kernel: *kernel,
        n_x: n,
        n_y: m,
    })
}

/// [`mmd`] with the median-heuristic bandwidth of the pooled samples.
pub fn mmd_median(x: ArrayView2<f64>, y: ArrayView2<f64>, seed: u64) -> Result<MmdReport> {
    check_dim(x.ncols(), y.ncols())?;
    let pooled = ndarray::concatenate(Axis(0), &[x, y]).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let bw = median_bandwidth_with(pooled.view(), MEDIAN_SUBSAMPLE_CAP, seed)?;
    mmd(x, y, &KernelSpec::new(bw, x.ncols())?)
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-axis bounds `mean ± half_width · sd` of the reference measure.
pub fn default_bounds(base: &ReferenceMeasure, half_width_sd: f64) -> Vec<(f64, f64)> {
    base.mean
        .iter()
        .zip(&base.variance)
        .map(|(m, v)| (m - half_width_sd * v.sqrt(), m + half_width_sd * v.sqrt()))
        .collect()
}

/// Trapezoid nodes and weights on a box of dimension 1 or 2.
fn trapezoid_grid(bounds: &[(f64, f64)], grid_points: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = bounds.len();
    if d == 0 || d > 2 {
        return Err(Error::Unsupported(format!("quadrature supports d <= 2, got {d}")));
    }
    if grid_points < 3 {
        return Err(Error::InvalidConfig("quadrature needs >= 3 grid points per axis".into()));
    }
    let axes: Vec<(Vec<f64>, Vec<f64>)> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let h = (hi - lo) / (grid_points - 1) as f64;
            let x: Vec<f64> = (0..grid_points).map(|i| lo + h * i as f64).collect();
            let w: Vec<f64> = (0..grid_points)
                .map(|i| if i == 0 || i == grid_points - 1 { 0.5 * h } else { h })
                .collect();
            (x, w)
        })
        .collect();
    let total = grid_points.pow(d as u32);
    let mut nodes = Array2::zeros((total, d));
    let mut weights = Vec::with_capacity(total);
    for idx in 0..total {
        let mut w = 1.0;
        let mut rest = idx;
        for (j, (x, wx)) in axes.iter().enumerate() {
            let i = rest % grid_points;
            rest /= grid_points;
            nodes[[idx, j]] = x[i];
            w *= wx[i];
        }
        weights.push(w);
    }
    Ok((nodes, weights))
}

/// Trapezoid-rule `A(λf) = log ∫ exp(λ f(x)) p₀(x) dx` over `bounds`.
pub fn log_partition_quadrature(
    f: impl Fn(&[f64]) -> f64,
    base: &ReferenceMeasure,
    lambda: f64,
    bounds: &[(f64, f64)],
    grid_points: usize,
) -> Result<f64> {
    check_dim(base.dim(), bounds.len())?;
    let (nodes, weights) = trapezoid_grid(bounds, grid_points)?;
    let mut terms = Vec::with_capacity(weights.len());
    let mut coverage = Vec::with_capacity(weights.len());
    for (row, w) in nodes.rows().into_iter().zip(&weights) {
        let x = row.as_slice().expect("standard layout");
        let lp = base.log_density_unchecked(x) + w.ln();
        let t = lp + lambda * f(x);
        if t.is_nan() || t == f64::INFINITY {
            return Err(Error::non_finite("quadrature integrand"));
        }
        terms.push(t);
        coverage.push(lp);
    }
    let mass = log_sum_exp(coverage.iter().copied()).exp();
    if mass < 1.0 - 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "quadrature box covers only {mass} of the reference mass"
        )));
    }
    Ok(log_sum_exp(terms.iter().copied()))
}

/// `log E_{p₀}[exp(λ f)]` by plain Monte Carlo with a delta-method standard
/// error.
pub fn log_partition_importance(
    f: impl Fn(&[f64]) -> f64,
    base: &ReferenceMeasure,
    lambda: f64,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_mc < 100 {
        return Err(Error::InvalidConfig("importance sampling needs n_mc >= 100".into()));
    }
    let draws = base.sample(n_mc, &mut substream(seed, "partition"));
    let logw: Vec<f64> = draws
        .rows()
        .into_iter()
        .map(|r| lambda * f(r.as_slice().expect("standard layout")))
        .collect();
    log_mean_exp_with_se(&logw)
}

fn log_mean_exp_with_se(logw: &[f64]) -> Result<(f64, f64)> {
    let n = logw.len() as f64;
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::non_finite(
            "importance weights underflow or overflow; use quadrature or a larger n_mc",
        ));
    }
    let w: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((m + mean.ln(), (var / n).sqrt() / mean))
}

/// How log-partition values are computed for likelihood evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PartitionMethod {
    /// Reference draws shared by every condition.
    Importance { n_mc: usize },
    /// Trapezoid rule on `mean ± 8 sd` of the reference, `grid_points` per axis.
    Quadrature { grid_points: usize },
}

impl Default for PartitionMethod {
    fn default() -> Self {
        PartitionMethod::Importance { n_mc: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub mean_nll: f64,
    pub std_err: f64,
    /// `(A_x, standard error)` per test row; one entry when unconditional.
    pub partition_estimates: Vec<(f64, f64)>,
}

const QUADRATURE_HALF_WIDTH_SD: f64 = 8.0;

/// Log-partition nodes: `(points, log weights)` with weights including `p₀`.
fn partition_nodes(base: &ReferenceMeasure, method: PartitionMethod, seed: u64) -> Result<(Array2<f64>, Vec<f64>, bool)> {
    match method {
        PartitionMethod::Importance { n_mc } => {
            if n_mc < 100 {
                return Err(Error::InvalidConfig("importance sampling needs n_mc >= 100".into()));
            }
            let pts = base.sample(n_mc, &mut substream(seed, "partition"));
            let lw = vec![-(n_mc as f64).ln(); n_mc];
            Ok((pts, lw, true))
        }
        PartitionMethod::Quadrature { grid_points } => {
            let (pts, w) = trapezoid_grid(&default_bounds(base, QUADRATURE_HALF_WIDTH_SD), grid_points)?;
            let lw = pts
                .rows()
                .into_iter()
                .zip(&w)
                .map(|(r, w)| w.ln() + base.log_density_unchecked(r.as_slice().expect("standard layout")))
                .collect();
            Ok((pts, lw, false))
        }
    }
}

fn partition_from_row(values: impl Iterator<Item = f64>, lw: &[f64], importance: bool, lambda: f64) -> Result<(f64, f64)> {
    if importance {
        let logw: Vec<f64> = values.map(|v| lambda * v).collect();
        log_mean_exp_with_se(&logw)
    } else {
        let t: Vec<f64> = values.zip(lw).map(|(v, w)| lambda * v + w).collect();
        let a = log_sum_exp(t.iter().copied());
        if !a.is_finite() {
            return Err(Error::non_finite("quadrature log-partition"));
        }
        Ok((a, 0.0))
    }
}

fn summarize(nll: Vec<f64>, partition_estimates: Vec<(f64, f64)>) -> Result<NllReport> {
    let n = nll.len() as f64;
    if nll.is_empty() {
        return Err(Error::DegenerateData("empty test set".into()));
    }
    let mean = nll.iter().sum::<f64>() / n;
    let sd = if nll.len() > 1 {
        (nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if !mean.is_finite() {
        return Err(Error::non_finite("negative log-likelihood"));
    }
    Ok(NllReport {
        mean_nll: mean,
        std_err: sd / n.sqrt(),
        partition_estimates,
    })
}

/// Held-out mean `-log p(y | x)` of a conditional model, with
/// `log p(y|x) = λ f(x, y) + log p₀(y) - A_x(λ f)`.
pub fn nll_conditional(model: &TrainedModel, test: &Dataset, method: PartitionMethod, seed: u64) -> Result<NllReport> {
    let Mode::Conditional { x_cols, y_cols, x_scale, y_scale } = &model.mode else {
        return Err(Error::InvalidConfig("nll_conditional needs a conditional model".into()));
    };
    let x = test.samples.select(Axis(1), x_cols);
    let y = test.samples.select(Axis(1), y_cols);
    let lambda = model.config.lambda;
    let (nodes, lw, importance) = partition_nodes(&model.base, method, seed)?;
    let xs = x.mapv(|v| v / x_scale);
    let ys = nodes.mapv(|v| v / y_scale);
    let mut nll = Vec::with_capacity(x.nrows());
    let mut parts = Vec::with_capacity(x.nrows());
    const CHUNK: usize = 128;
    for lo in (0..x.nrows()).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(x.nrows());
        let f_nodes = model.f.eval_pairs(xs.slice(ndarray::s![lo..hi, ..]), ys.view())?;
        for i in lo..hi {
            let a = partition_from_row(f_nodes.row(i - lo).iter().copied(), &lw, importance, lambda)?;
            let xi = x.row(i).to_vec();
            let yi = y.row(i).to_vec();
            let lp = model.log_unnormalized(Some(&xi), &yi)?;
            nll.push(a.0 - lp);
            parts.push(a);
        }
    }
    summarize(nll, parts)
}

/// Held-out mean `-log p(x)` of an unconditional model.
pub fn nll_unconditional(model: &TrainedModel, test: &Dataset, method: PartitionMethod, seed: u64) -> Result<NllReport> {
    if model.is_conditional() {
        return Err(Error::InvalidConfig("nll_unconditional needs an unconditional model".into()));
    }
    check_dim(model.output_dim(), test.dim())?;
    let (nodes, lw, importance) = partition_nodes(&model.base, method, seed)?;
    let values = model.f.eval_rows(nodes.view())?;
    let a = partition_from_row(values.into_iter(), &lw, importance, model.config.lambda)?;
    let mut nll = Vec::with_capacity(test.n());
    for row in test.samples.rows() {
        nll.push(a.0 - model.log_unnormalized(None, &row.to_vec())?);
    }
    summarize(nll, vec![a])
}

/// Uniform 1-d grid with trapezoid weights.
fn uniform_grid_weights(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.len() < 200 {
        return Err(Error::InvalidConfig(format!(
            "oracle grid needs >= 200 points, got {}",
            grid.len()
        )));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) || grid.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
        return Err(Error::InvalidConfig("oracle grid must be uniform and increasing".into()));
    }
    let n = grid.len();
    Ok((0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect())
}

/// Brute-force check of the variational form of the log-partition on a 1-d
/// grid: `A(λf) = max_q λ⟨q, f⟩ - KL(q‖p₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenchelOracle {
    /// Value at the closed-form maximizer `q ∝ p₀ exp(λ f)`.
    pub value: f64,
    /// Maximizing density on the grid.
    pub density: Vec<f64>,
    /// Value reached by iterative ascent over grid densities.
    pub ascent_value: f64,
    pub ascent_density: Vec<f64>,
}

/// `λ Σ q f - Σ q log(q/p)` over grid probability vectors.
fn fenchel_objective(q: &[f64], p: &[f64], f: &[f64], lambda: f64) -> f64 {
    q.iter()
        .zip(p)
        .zip(f)
        .map(|((q, p), f)| if *q > 0.0 { q * (lambda * f - (q / p).ln()) } else { 0.0 })
        .sum()
}

pub fn oracle_fenchel_log_partition(
    f: impl Fn(f64) -> f64,
    base: &ReferenceMeasure,
    lambda: f64,
    grid: &[f64],
) -> Result<FenchelOracle> {
    check_dim(1, base.dim())?;
    let w = uniform_grid_weights(grid)?;
    let fv: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let lp0: Vec<f64> = grid.iter().map(|&x| base.log_density_unchecked(&[x])).collect();
    // Grid probabilities of p₀, kept unnormalized so the value is the
    // quadrature of ∫ p₀ exp(λ f).
    let p: Vec<f64> = lp0.iter().zip(&w).map(|(l, w)| (l + w.ln()).exp()).collect();
    let logits: Vec<f64> = fv.iter().zip(&p).map(|(f, p)| lambda * f + p.ln()).collect();
    let a = log_sum_exp(logits.iter().copied());
    let q: Vec<f64> = logits.iter().map(|l| (l - a).exp()).collect();
    let value = fenchel_objective(&q, &p, &fv, lambda);

    // Mirror ascent on grid probabilities from q = p₀, damped by 1/2 per step.
    let mut theta: Vec<f64> = p.iter().map(|p| p.ln()).collect();
    let mut qa = vec![0.0; q.len()];
    for _ in 0..200 {
        let z = log_sum_exp(theta.iter().copied());
        for (o, t) in qa.iter_mut().zip(&theta) {
            *o = (t - z).exp();
        }
        let mut delta: f64 = 0.0;
        for i in 0..theta.len() {
            let g = lambda * fv[i] - (qa[i] / p[i]).ln() - 1.0;
            let step = 0.5 * g;
            theta[i] += step;
            delta = delta.max(step.abs());
        }
        let z = log_sum_exp(theta.iter().copied());
        theta.iter_mut().for_each(|t| *t -= z);
        if delta < 1e-14 {
            break;
        }
    }
    let z = log_sum_exp(theta.iter().copied());
    for (o, t) in qa.iter_mut().zip(&theta) {
        *o = (t - z).exp();
    }
    let ascent_value = fenchel_objective(&qa, &p, &fv, lambda);
    Ok(FenchelOracle {
        value,
        density: q.iter().zip(&w).map(|(q, w)| q / w).collect(),
        ascent_value,
        ascent_density: qa.iter().zip(&w).map(|(q, w)| q / w).collect(),
    })
}

/// Brute-force check of `KL(q‖p₀) = max_ν E_q[ν] - E_{p₀}[exp ν] + 1` on a
/// 1-d grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDualOracle {
    pub quadrature_kl: f64,
    /// Dual objective at `ν* = log(q/p₀)`.
    pub closed_form_value: f64,
    /// Dual objective after free coordinate-wise ascent over grid values of `ν`.
    pub ascent_value: f64,
}

pub fn oracle_kl_dual(q_density: &[f64], base: &ReferenceMeasure, grid: &[f64]) -> Result<KlDualOracle> {
    check_dim(1, base.dim())?;
    check_dim(grid.len(), q_density.len())?;
    let w = uniform_grid_weights(grid)?;
    let p: Vec<f64> = grid.iter().map(|&x| base.log_density_unchecked(&[x]).exp()).collect();
    let mass_q: f64 = q_density.iter().zip(&w).map(|(q, w)| q * w).sum();
    let mass_p: f64 = p.iter().zip(&w).map(|(p, w)| p * w).sum();
    if (mass_q - 1.0).abs() > 1e-8 || (mass_p - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidConfig(format!(
            "grid densities must be normalized (q: {mass_q}, p0: {mass_p})"
        )));
    }
    let kl: f64 = q_density
        .iter()
        .zip(&p)
        .zip(&w)
        .map(|((q, p), w)| if *q > 0.0 { w * q * (q / p).ln() } else { 0.0 })
        .sum();
    let dual = |nu: &[f64]| -> f64 {
        nu.iter()
            .zip(q_density)
            .zip(&p)
            .zip(&w)
            .map(|(((n, q), p), w)| {
                let eq = if *q > 0.0 { q * n } else { 0.0 };
                w * (eq - p * n.exp())
            })
            .sum::<f64>()
            + 1.0
    };
    let star: Vec<f64> = q_density
        .iter()
        .zip(&p)
        .map(|(q, p)| if *q > 0.0 { (q / p).ln() } else { f64::NEG_INFINITY })
        .collect();
    let closed = dual(&star);
    // Each coordinate of the dual is concave and separable; Newton steps from
    // ν = 0 with a cap on the step length.
    let mut nu = vec![0.0f64; grid.len()];
    for (i, v) in nu.iter_mut().enumerate() {
        if q_density[i] <= 0.0 {
            *v = -745.0;
            continue;
        }
        for _ in 0..100 {
            let e = p[i] * v.exp();
            let step = ((q_density[i] - e) / e).clamp(-5.0, 5.0);
            *v += step;
            if step.abs() < 1e-15 {
                break;
            }
        }
    }
    Ok(KlDualOracle {
        quadrature_kl: kl,
        closed_form_value: closed,
        ascent_value: dual(&nu),
    })
}

/// A discretized saddle-point instance: `f` spans `m` kernel functions,
/// `q` ranges over probability vectors on a 1-d grid.
#[derive(Clone, Debug)]
pub struct DualityInstance {
    pub centers: Vec<f64>,
    pub kernel: KernelSpec,
    pub grid: Vec<f64>,
    pub data: Vec<f64>,
    pub base: ReferenceMeasure,
    pub eta: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub max_min: f64,
    pub min_max: f64,
}

impl DualityInstance {
    fn parts(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>, Vec<f64>)> {
        check_dim(1, self.base.dim())?;
        let w = uniform_grid_weights(&self.grid)?;
        let m = self.centers.len();
        let k = |a: f64, b: f64| self.kernel.eval_unchecked(&[a], &[b]);
        let gram = DMatrix::from_fn(m, m, |a, b| k(self.centers[a], self.centers[b]));
        let phi = DMatrix::from_fn(self.grid.len(), m, |i, a| k(self.grid[i], self.centers[a]));
        let nd = self.data.len() as f64;
        let md = DVector::from_fn(m, |a, _| self.data.iter().map(|&x| k(x, self.centers[a])).sum::<f64>() / nd);
        let p: Vec<f64> = self
            .grid
            .iter()
            .zip(&w)
            .map(|(&x, w)| w * self.base.log_density_unchecked(&[x]).exp())
            .collect();
        let z: f64 = p.iter().sum();
        Ok((gram, phi, md, p.iter().map(|v| v / z).collect()))
    }

    /// `ℓ(α, q) = m_Dᵀα - qᵀΦα - (η/2)αᵀKα + (1/λ) KL(q‖p)`.
    pub fn objective(&self, alpha: &[f64], q: &[f64]) -> Result<f64> {
        let (gram, phi, md, p) = self.parts()?;
        let a = DVector::from_column_slice(alpha);
        let fq = &phi * &a;
        let kl: f64 = q.iter().zip(&p).map(|(q, p)| if *q > 0.0 { q * (q / p).ln() } else { 0.0 }).sum();
        let eq: f64 = q.iter().zip(fq.iter()).map(|(q, f)| q * f).sum();
        Ok(md.dot(&a) - eq - 0.5 * self.eta * a.dot(&(&gram * &a)) + kl / self.lambda)
    }

    /// Solves both orders of the saddle point: Newton ascent in `α` for
    /// max-min, mirror descent over the simplex for min-max.
    pub fn solve(&self) -> Result<DualityReport> {
        let (gram, phi, md, p) = self.parts()?;
        let (eta, lambda) = (self.eta, self.lambda);
        let m = md.len();
        let logp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let softmax = |a: &DVector<f64>| -> (Vec<f64>, f64) {
            let fq = &phi * a;
            let l: Vec<f64> = fq.iter().zip(&logp).map(|(f, lp)| lambda * f + lp).collect();
            let z = log_sum_exp(l.iter().copied());
            (l.iter().map(|v| (v - z).exp()).collect(), z)
        };
        // max over α of m_Dᵀα - (η/2)αᵀKα - (1/λ) log Σ p exp(λ Φα).
        let mut alpha = DVector::zeros(m);
        for _ in 0..100 {
            let (q, _) = softmax(&alpha);
            let qv = DVector::from_vec(q.clone());
            let grad = &md - eta * (&gram * &alpha) - phi.transpose() * &qv;
            let mut cov = DMatrix::from_diagonal(&qv) - &qv * qv.transpose();
            cov *= lambda;
            let hess = -(eta * &gram) - phi.transpose() * cov * &phi;
            let step = (-hess)
                .cholesky()
                .ok_or_else(|| Error::Solver("max-min Hessian not negative definite".into()))?
                .solve(&grad);
            alpha += &step;
            if step.amax() < 1e-13 {
                break;
            }
        }
        let (_, z) = softmax(&alpha);
        let max_min = md.dot(&alpha) - 0.5 * eta * alpha.dot(&(&gram * &alpha)) - z / lambda;

        // min over q of (1/2η) bᵀK⁻¹b + (1/λ) KL(q‖p), b = m_D - Φᵀq.
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Solver("center Gram not positive definite".into()))?;
        let value = |q: &[f64]| -> f64 {
            let b = &md - phi.transpose() * DVector::from_column_slice(q);
            let kl: f64 = q.iter().zip(&p).map(|(q, p)| if *q > 0.0 { q * (q / p).ln() } else { 0.0 }).sum();
            0.5 / eta * b.dot(&chol.solve(&b)) + kl / lambda
        };
        let mut theta = logp.clone();
        let mut q = p.clone();
        let step = 0.5 * lambda;
        for _ in 0..20_000 {
            let b = &md - phi.transpose() * DVector::from_column_slice(&q);
            let kb = chol.solve(&b);
            let fgrad = -(&phi * kb) / eta;
            let mut delta: f64 = 0.0;
            for i in 0..theta.len() {
                let g = fgrad[i] + ((q[i] / p[i]).ln() + 1.0) / lambda;
                theta[i] -= step * g;
            }
            let z = log_sum_exp(theta.iter().copied());
            for i in 0..theta.len() {
                theta[i] -= z;
                let nq = theta[i].exp();
                delta = delta.max((nq - q[i]).abs());
                q[i] = nq;
            }
            if delta < 1e-15 {
                break;
            }
        }
        Ok(DualityReport {
            max_min,
            min_max: value(&q),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn std_normal() -> ReferenceMeasure {
        ReferenceMeasure::new(vec![0.0], vec![1.0]).unwrap()
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, "g");
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identical_sets_have_zero_biased_mmd() {
        let x = gaussian(50, 2, 1);
        let k = KernelSpec::new(1.0, 2).unwrap();
        assert_eq!(mmd(x.view(), x.view(), &k).unwrap().mmd_biased, 0.0);
        let y = gaussian(40, 2, 2);
        let a = mmd(x.view(), y.view(), &k).unwrap();
        let b = mmd(y.view(), x.view(), &k).unwrap();
        assert_abs_diff_eq!(a.mmd_unbiased, b.mmd_unbiased, epsilon = 1e-14);
        assert_abs_diff_eq!(a.mmd_biased, b.mmd_biased, epsilon = 1e-14);
    }

    #[test]
    fn two_by_two_by_hand() {
        let x = array![[0.0], [1.0]];
        let y = array![[0.0], [2.0]];
        let k = KernelSpec::new(1.0, 1).unwrap();
        let e = |d: f64| (-d * d).exp();
        let kxx = 2.0 + 2.0 * e(1.0);
        let kyy = 2.0 + 2.0 * e(2.0);
        let kxy = 1.0 + e(2.0) + e(1.0) + e(1.0);
        let r = mmd(x.view(), y.view(), &k).unwrap();
        assert_abs_diff_eq!(r.mmd_biased, kxx / 4.0 + kyy / 4.0 - 2.0 * kxy / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            r.mmd_unbiased,
            2.0 * e(1.0) / 2.0 + 2.0 * e(2.0) / 2.0 - 2.0 * kxy / 4.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn null_mmd_stays_in_band() {
        let mut inside = 0;
        for s in 0..100 {
            let x = gaussian(500, 1, 1000 + s);
            let y = gaussian(500, 1, 2000 + s);
            let r = mmd(x.view(), y.view(), &KernelSpec::new(1.0, 1).unwrap()).unwrap();
            if r.mmd_unbiased.abs() <= 3.0 * (2.0f64 / 500.0).sqrt() {
                inside += 1;
            }
        }
        assert!(inside >= 95);
    }

    fn bounds1() -> Vec<(f64, f64)> {
        vec![(-12.0, 12.0)]
    }

    #[test]
    fn quadrature_examples() {
        let b = std_normal();
        assert_abs_diff_eq!(log_partition_quadrature(|_| 0.0, &b, 1.0, &bounds1(), 2001).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(log_partition_quadrature(|_| 0.7, &b, 1.0, &bounds1(), 2001).unwrap(), 0.7, epsilon = 1e-6);
        assert_abs_diff_eq!(log_partition_quadrature(|x| x[0], &b, 1.0, &bounds1(), 4001).unwrap(), 0.5, epsilon = 1e-5);
        assert!(log_partition_quadrature(|_| 0.0, &b, 1.0, &[(-1.0, 1.0)], 201).is_err());
        let b3 = ReferenceMeasure::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(matches!(
            log_partition_quadrature(|_| 0.0, &b3, 1.0, &[(-5.0, 5.0); 3], 11),
            Err(Error::Unsupported(_))
        ));
        let b2 = ReferenceMeasure::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
        let a = log_partition_quadrature(|x| 0.3 * x[0] - 0.2 * x[1], &b2, 1.0, &default_bounds(&b2, 8.0), 401).unwrap();
        // Gaussian MGF: Σ (t μ + t² σ² / 2).
        assert_abs_diff_eq!(a, 0.045 + (-0.2 + 0.02 * 0.5), epsilon = 1e-6);
    }

    #[test]
    fn log_partition_is_convex_in_lambda() {
        let b = std_normal();
        let f = |x: &[f64]| (2.0 * x[0]).sin() + 0.3 * x[0];
        let a: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&l| log_partition_quadrature(f, &b, l, &bounds1(), 2001).unwrap())
            .collect();
        assert!(a[1] <= 0.5 * (a[0] + a[2]) + 1e-8);
    }

    #[test]
    fn importance_agrees_with_quadrature() {
        let b = std_normal();
        assert_eq!(log_partition_importance(|_| 0.0, &b, 1.0, 500, 1).unwrap(), (0.0, 0.0));
        let f = |x: &[f64]| (-(x[0] - 1.0).powi(2)).exp();
        let q = log_partition_quadrature(f, &b, 1.5, &bounds1(), 2001).unwrap();
        let (est, se) = log_partition_importance(f, &b, 1.5, 20_000, 2).unwrap();
        assert!((est - q).abs() <= 3.0 * se, "{est} vs {q} (se {se})");
        assert!(log_partition_importance(f, &b, 1.0, 50, 2).is_err());
    }

    #[test]
    fn importance_error_shrinks_like_root_n() {
        let b = std_normal();
        let f = |x: &[f64]| x[0].sin();
        let pts: Vec<(f64, f64)> = [500usize, 2000, 8000, 32000]
            .iter()
            .map(|&n| {
                let (_, se) = log_partition_importance(f, &b, 1.0, n, 3).unwrap();
                ((n as f64).ln(), se.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
    }

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn fenchel_oracle_zero_function() {
        let b = std_normal();
        let g = grid(-10.0, 10.0, 2001);
        let o = oracle_fenchel_log_partition(|_| 0.0, &b, 1.0, &g).unwrap();
        assert_abs_diff_eq!(o.value, 0.0, epsilon = 1e-6);
        for (x, d) in g.iter().zip(&o.density) {
            assert_abs_diff_eq!(*d, b.log_density(&[*x]).unwrap().exp(), epsilon = 1e-6);
        }
        assert!(oracle_fenchel_log_partition(|_| 0.0, &b, 1.0, &grid(-1.0, 1.0, 50)).is_err());
    }

    #[test]
    fn fenchel_routes_agree() {
        let b = std_normal();
        let g = grid(-10.0, 10.0, 1001);
        let f = |x: f64| 0.8 * (-(x - 0.5f64).powi(2)).exp() - 0.4 * (-(x + 1.0f64).powi(2) / 2.0).exp();
        let o = oracle_fenchel_log_partition(f, &b, 1.0, &g).unwrap();
        assert_abs_diff_eq!(o.value, o.ascent_value, epsilon = 1e-3);
        let q = log_partition_quadrature(|x| f(x[0]), &b, 1.0, &[(-10.0, 10.0)], 1001).unwrap();
        assert_abs_diff_eq!(o.value, q, epsilon = 1e-10);
    }

    #[test]
    fn kl_dual_examples() {
        let b = std_normal();
        let g = grid(-12.0, 12.0, 4001);
        let p: Vec<f64> = g.iter().map(|x| b.log_density(&[*x]).unwrap().exp()).collect();
        let o = oracle_kl_dual(&p, &b, &g).unwrap();
        assert!(o.quadrature_kl.abs() < 1e-8 && o.closed_form_value.abs() < 1e-8);
        let q: Vec<f64> = g.iter().map(|x| (-0.5 * (x - 0.5f64).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt()).collect();
        let o = oracle_kl_dual(&q, &b, &g).unwrap();
        assert_abs_diff_eq!(o.quadrature_kl, 0.125, epsilon = 1e-4);
        assert_abs_diff_eq!(o.closed_form_value, 0.125, epsilon = 1e-4);
        assert_abs_diff_eq!(o.ascent_value, o.closed_form_value, epsilon = 1e-4);
    }

    fn untrained(conditional: bool) -> (TrainedModel, Dataset) {
        use crate::data::{gen_linear_gaussian, gen_two_moons};
        use crate::trainer::{train, train_conditional, TrainConfig};
        let cfg = TrainConfig { outer_iters: 0, ..TrainConfig::default() };
        if conditional {
            let d = gen_linear_gaussian(80, 4).unwrap();
            (train_conditional(&d, &cfg).unwrap(), d)
        } else {
            let d = gen_two_moons(80, 4).unwrap();
            (train(&d, &cfg).unwrap(), d)
        }
    }

    #[test]
    fn nll_at_zero_function_is_the_reference_nll() {
        let (m, d) = untrained(true);
        let y = d.y().unwrap();
        let direct = -y.rows().into_iter().map(|r| m.base.log_density(&r.to_vec()).unwrap()).sum::<f64>() / d.n() as f64;
        for method in [PartitionMethod::Importance { n_mc: 500 }, PartitionMethod::Quadrature { grid_points: 801 }] {
            let r = nll_conditional(&m, &d, method, 1).unwrap();
            assert!((r.mean_nll - direct).abs() < 1e-9, "{method:?}: {} vs {direct}", r.mean_nll);
            assert_eq!(r.partition_estimates.len(), d.n());
            assert!(r.std_err >= 0.0);
        }
        assert!(nll_unconditional(&m, &d, PartitionMethod::default(), 1).is_err());

        let (m, d) = untrained(false);
        let direct = -d.samples.rows().into_iter().map(|r| m.base.log_density(&r.to_vec()).unwrap()).sum::<f64>() / d.n() as f64;
        let r = nll_unconditional(&m, &d, PartitionMethod::Quadrature { grid_points: 201 }, 1).unwrap();
        assert!((r.mean_nll - direct).abs() < 1e-9);
        assert!(nll_conditional(&m, &d, PartitionMethod::default(), 1).is_err());
    }

    #[test]
    fn conditional_partition_methods_agree() {
        use crate::rkhs::RkhsFunction;
        let (mut m, d) = untrained(true);
        let mut rng = substream(9, "c");
        let pts = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.5..1.5));
        let coef: Vec<f64> = (0..6).map(|_| rng.random_range(-0.8..0.8)).collect();
        m.f = RkhsFunction::from_expansion(*m.f.kernel(), pts.view(), coef).unwrap();
        let a = nll_conditional(&m, &d, PartitionMethod::Importance { n_mc: 20_000 }, 2).unwrap();
        let b = nll_conditional(&m, &d, PartitionMethod::Quadrature { grid_points: 801 }, 2).unwrap();
        for ((ia, se), (qb, _)) in a.partition_estimates.iter().zip(&b.partition_estimates) {
            assert!((ia - qb).abs() <= 4.0 * se + 1e-9, "{ia} vs {qb} (se {se})");
        }
    }

    #[test]
    fn small_duality_instance_closes_the_gap() {
        let mut rng = substream(5, "dual");
        let inst = DualityInstance {
            centers: grid(-3.0, 3.0, 8),
            kernel: KernelSpec::new(1.0, 1).unwrap(),
            grid: grid(-6.0, 6.0, 200),
            data: (0..30).map(|_| rng.random_range(-1.0..2.0)).collect(),
            base: std_normal(),
            eta: 0.5,
            lambda: 1.0,
        };
        let r = inst.solve().unwrap();
        assert!(r.max_min <= r.min_max + 1e-9);
        assert_abs_diff_eq!(r.max_min, r.min_max, epsilon = 1e-6);
    }
}
