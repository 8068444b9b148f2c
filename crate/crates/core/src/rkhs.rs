//! Functions in the RKHS of the RBF kernel and the stochastic functional
//! gradient updates for the witness `f` and the log density-ratio `ν`.
//!
//! Two backends share one interface:
//!
//! * `expansion`: `f(·) = s · Σ_i c_i k(x_i, ·)` with a lazily applied global
//!   multiplier `s`, so the `(1 - ητ)` shrink of every step is O(1).
//! * `random_feature`: `f(·) = β·Φ(·)` over a fixed [`RandomFeatureMap`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{sq_dist, KernelSpec, RandomFeatureMap};

/// Below this the lazy multiplier is folded back into the coefficients.
const MIN_LAZY_SCALE: f64 = 1e-100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Expansion,
    RandomFeature,
}

#[derive(Clone, Debug)]
enum Repr {
    Expansion {
        points: Vec<f64>,
        coeffs: Vec<f64>,
        scale: f64,
    },
    RandomFeature {
        map: Arc<RandomFeatureMap>,
        beta: Vec<f64>,
    },
}

// Expansions compare by effective coefficients, so a lazily scaled function
// equals its saved and reloaded copy.
impl PartialEq for Repr {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                Repr::Expansion { points: p, coeffs: c, scale: s },
                Repr::Expansion { points: q, coeffs: e, scale: t },
            ) => p == q && c.len() == e.len() && c.iter().zip(e).all(|(a, b)| a * s == b * t),
            (Repr::RandomFeature { map: m, beta: b }, Repr::RandomFeature { map: n, beta: c }) => {
                m == n && b == c
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FunctionRepr", into = "FunctionRepr")]
pub struct RkhsFunction {
    kernel: KernelSpec,
    repr: Repr,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
enum FunctionRepr {
    Expansion {
        kernel: KernelSpec,
        support_points: Vec<Vec<f64>>,
        coefficients: Vec<f64>,
    },
    RandomFeature {
        kernel: KernelSpec,
        feature_map: RandomFeatureMap,
        beta: Vec<f64>,
    },
}

impl From<RkhsFunction> for FunctionRepr {
    fn from(f: RkhsFunction) -> Self {
        let d = f.kernel.input_dim;
        match f.repr {
            Repr::Expansion {
                points,
                coeffs,
                scale,
            } => FunctionRepr::Expansion {
                kernel: f.kernel,
                support_points: points.chunks(d).map(<[f64]>::to_vec).collect(),
                coefficients: coeffs.iter().map(|c| c * scale).collect(),
            },
            Repr::RandomFeature { map, beta } => FunctionRepr::RandomFeature {
                kernel: f.kernel,
                feature_map: (*map).clone(),
                beta,
            },
        }
    }
}

impl TryFrom<FunctionRepr> for RkhsFunction {
    type Error = Error;

    fn try_from(r: FunctionRepr) -> Result<Self> {
        match r {
            FunctionRepr::Expansion {
                kernel,
                support_points,
                coefficients,
            } => {
                let d = kernel.input_dim;
                if support_points.len() != coefficients.len() {
                    return Err(Error::ShapeMismatch(
                        "support points and coefficients differ in length".into(),
                    ));
                }
                if support_points.iter().any(|p| p.len() != d) {
                    return Err(Error::ShapeMismatch(
                        "support point dimension differs from kernel".into(),
                    ));
                }
                Ok(RkhsFunction {
                    kernel,
                    repr: Repr::Expansion {
                        points: support_points.concat(),
                        coeffs: coefficients,
                        scale: 1.0,
                    },
                })
            }
            FunctionRepr::RandomFeature {
                kernel,
                feature_map,
                beta,
            } => RkhsFunction::from_beta(kernel, Arc::new(feature_map), beta),
        }
    }
}

impl RkhsFunction {
    /// The zero function with the kernel-expansion backend.
    pub fn zero(kernel: KernelSpec) -> Self {
        Self {
            kernel,
            repr: Repr::Expansion {
                points: Vec::new(),
                coeffs: Vec::new(),
                scale: 1.0,
            },
        }
    }

    /// The zero function with the random-feature backend.
    pub fn zero_random_feature(kernel: KernelSpec, map: Arc<RandomFeatureMap>) -> Result<Self> {
        let r = map.num_features();
        Self::from_beta(kernel, map, vec![0.0; r])
    }

    pub fn from_expansion(
        kernel: KernelSpec,
        points: ArrayView2<f64>,
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        check_dim(kernel.input_dim, points.ncols())?;
        if points.nrows() != coefficients.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} support points but {} coefficients",
                points.nrows(),
                coefficients.len()
            )));
        }
        Ok(Self {
            kernel,
            repr: Repr::Expansion {
                points: points.iter().copied().collect(),
                coeffs: coefficients,
                scale: 1.0,
            },
        })
    }

    pub fn from_beta(kernel: KernelSpec, map: Arc<RandomFeatureMap>, beta: Vec<f64>) -> Result<Self> {
        check_dim(kernel.input_dim, map.input_dim())?;
        if beta.len() != map.num_features() {
            return Err(Error::ShapeMismatch(format!(
                "beta has length {} but the map has {} features",
                beta.len(),
                map.num_features()
            )));
        }
        Ok(Self {
            kernel,
            repr: Repr::RandomFeature { map, beta },
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim
    }

    pub fn backend(&self) -> Backend {
        match self.repr {
            Repr::Expansion { .. } => Backend::Expansion,
            Repr::RandomFeature { .. } => Backend::RandomFeature,
        }
    }

    /// Number of stored terms: support points, or features.
    pub fn num_terms(&self) -> usize {
        match &self.repr {
            Repr::Expansion { coeffs, .. } => coeffs.len(),
            Repr::RandomFeature { beta, .. } => beta.len(),
        }
    }

    /// Effective coefficients (expansion) or β (random features).
    pub fn coefficients(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Expansion { coeffs, scale, .. } => coeffs.iter().map(|c| c * scale).collect(),
            Repr::RandomFeature { beta, .. } => beta.clone(),
        }
    }

    /// Support points of an expansion; `None` for the random-feature backend.
    pub fn support_points(&self) -> Option<Array2<f64>> {
        match &self.repr {
            Repr::Expansion { points, coeffs, .. } => Some(
                Array2::from_shape_vec((coeffs.len(), self.kernel.input_dim), points.clone())
                    .expect("consistent expansion storage"),
            ),
            Repr::RandomFeature { .. } => None,
        }
    }

    pub fn feature_map(&self) -> Option<&Arc<RandomFeatureMap>> {
        match &self.repr {
            Repr::RandomFeature { map, .. } => Some(map),
            Repr::Expansion { .. } => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.kernel.input_dim, x.len())?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        match &self.repr {
            Repr::Expansion {
                points,
                coeffs,
                scale,
            } => {
                let d = self.kernel.input_dim;
                let inv = 1.0 / self.kernel.bandwidth_sq;
                let sum: f64 = points
                    .chunks_exact(d)
                    .zip(coeffs)
                    .map(|(p, c)| c * (-sq_dist(p, x) * inv).exp())
                    .sum();
                scale * sum
            }
            Repr::RandomFeature { map, beta } => map.linear_value(beta, x),
        }
    }

    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.kernel.input_dim, x.len())?;
        let mut g = vec![0.0; x.len()];
        self.value_grad_unchecked(x, &mut g);
        Ok(g)
    }

    /// Value at `x`, writing the input gradient into `grad`.
    pub(crate) fn value_grad_unchecked(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match &self.repr {
            Repr::Expansion {
                points,
                coeffs,
                scale,
            } => {
                let d = self.kernel.input_dim;
                let inv = 1.0 / self.kernel.bandwidth_sq;
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut value = 0.0;
                for (p, c) in points.chunks_exact(d).zip(coeffs) {
                    let w = c * (-sq_dist(p, x) * inv).exp();
                    value += w;
                    for j in 0..d {
                        grad[j] += w * (x[j] - p[j]);
                    }
                }
                let gscale = -2.0 * inv * scale;
                grad.iter_mut().for_each(|g| *g *= gscale);
                scale * value
            }
            Repr::RandomFeature { map, beta } => map.linear_value_grad(beta, x, grad),
        }
    }

    /// `F[i, j] = f([a_i, b_j])` for every pair of rows, where the input is
    /// split into a leading block `a` and a trailing block `b`.
    pub fn eval_pairs(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        let da = a.ncols();
        check_dim(self.kernel.input_dim, da + b.ncols())?;
        match &self.repr {
            Repr::Expansion {
                points,
                coeffs,
                scale,
            } => {
                let d = self.kernel.input_dim;
                let m = coeffs.len();
                let bw = self.kernel.bandwidth_sq;
                let mut ka = Array2::zeros((a.nrows(), m));
                for (i, row) in a.rows().into_iter().enumerate() {
                    for t in 0..m {
                        let p = &points[t * d..t * d + da];
                        let d2: f64 = row.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum();
                        ka[[i, t]] = coeffs[t] * scale * (-d2 / bw).exp();
                    }
                }
                let mut kb = Array2::zeros((m, b.nrows()));
                for (j, row) in b.rows().into_iter().enumerate() {
                    for t in 0..m {
                        let p = &points[t * d + da..(t + 1) * d];
                        let d2: f64 = row.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum();
                        kb[[t, j]] = (-d2 / bw).exp();
                    }
                }
                Ok(ka.dot(&kb))
            }
            Repr::RandomFeature { map, beta } => {
                // cos(u + v) = cos u cos v - sin u sin v
                let r = beta.len();
                let mut ca = Array2::zeros((a.nrows(), r));
                let mut sa = Array2::zeros((a.nrows(), r));
                for (i, row) in a.rows().into_iter().enumerate() {
                    for k in 0..r {
                        let w = &map.frequency(k)[..da];
                        let u: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum();
                        let (su, cu) = u.sin_cos();
                        let c = beta[k] * map.scale();
                        ca[[i, k]] = c * cu;
                        sa[[i, k]] = c * su;
                    }
                }
                let mut cb = Array2::zeros((r, b.nrows()));
                let mut sb = Array2::zeros((r, b.nrows()));
                for (j, row) in b.rows().into_iter().enumerate() {
                    for k in 0..r {
                        let w = &map.frequency(k)[da..];
                        let v: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + map.phase(k);
                        let (sv, cv) = v.sin_cos();
                        cb[[k, j]] = cv;
                        sb[[k, j]] = sv;
                    }
                }
                Ok(ca.dot(&cb) - sa.dot(&sb))
            }
        }
    }

    /// `a·self + b·other` when both are random-feature functions on the same
    /// feature map.
    pub(crate) fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Option<Self> {
        match (&self.repr, &other.repr) {
            (Repr::RandomFeature { map: m1, beta: b1 }, Repr::RandomFeature { map: m2, beta: b2 })
                if Arc::ptr_eq(m1, m2) || m1 == m2 =>
            {
                Some(Self {
                    kernel: self.kernel,
                    repr: Repr::RandomFeature {
                        map: Arc::clone(m1),
                        beta: b1.iter().zip(b2).map(|(x, y)| a * x + b * y).collect(),
                    },
                })
            }
            _ => None,
        }
    }

    /// Values at every row of `points`.
    pub fn eval_rows(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_dim(self.kernel.input_dim, points.ncols())?;
        if let Repr::RandomFeature { map, beta } = &self.repr {
            let phi = map.feature_matrix(points)?;
            return Ok(phi.dot(&ndarray::ArrayView1::from(beta.as_slice())).to_vec());
        }
        let pts = points.as_standard_layout();
        Ok(pts
            .rows()
            .into_iter()
            .map(|r| self.eval_unchecked(r.as_slice().expect("standard layout")))
            .collect())
    }

    /// `‖f‖²_H`: `αᵀKα` for expansions, `‖β‖²` for random features.
    pub fn rkhs_norm_sq(&self) -> f64 {
        match &self.repr {
            Repr::Expansion {
                points,
                coeffs,
                scale,
            } => {
                let d = self.kernel.input_dim;
                let mut total = 0.0;
                for (i, (pi, ci)) in points.chunks_exact(d).zip(coeffs).enumerate() {
                    let mut row = 0.5 * ci;
                    for (pj, cj) in points.chunks_exact(d).zip(coeffs).take(i) {
                        row += cj * self.kernel.eval_unchecked(pi, pj);
                    }
                    total += 2.0 * ci * row;
                }
                (total * scale * scale).max(0.0)
            }
            Repr::RandomFeature { beta, .. } => beta.iter().map(|b| b * b).sum(),
        }
    }

    /// Multiplies the function by `factor`.
    pub fn scale_in_place(&mut self, factor: f64) {
        match &mut self.repr {
            Repr::Expansion { coeffs, scale, .. } => {
                *scale *= factor;
                if scale.abs() < MIN_LAZY_SCALE {
                    coeffs.iter_mut().for_each(|c| *c *= *scale);
                    *scale = 1.0;
                }
            }
            Repr::RandomFeature { beta, .. } => beta.iter_mut().for_each(|b| *b *= factor),
        }
    }

    /// Adds `Σ_i w_i k(p_i, ·)` for the rows `p_i` of `points`.
    pub fn add_weighted(&mut self, points: ArrayView2<f64>, weights: &[f64]) -> Result<()> {
        check_dim(self.kernel.input_dim, points.ncols())?;
        if points.nrows() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} weights",
                points.nrows(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::non_finite("functional gradient weights"));
        }
        match &mut self.repr {
            Repr::Expansion {
                points: stored,
                coeffs,
                scale,
            } => {
                for (row, w) in points.rows().into_iter().zip(weights) {
                    stored.extend(row.iter());
                    coeffs.push(w / *scale);
                }
            }
            Repr::RandomFeature { map, beta } => {
                let phi = map.feature_matrix(points)?;
                add_features(beta, phi.view(), weights);
            }
        }
        Ok(())
    }

    /// Drops the smallest-|coefficient| terms so at most `max_terms` remain.
    ///
    /// Returns `‖dropped‖_H`, which bounds the sup-norm change since
    /// `k(x, x) = 1`. The random-feature backend is never truncated.
    pub fn truncate(&mut self, max_terms: usize) -> f64 {
        let kernel = self.kernel;
        let Repr::Expansion {
            points,
            coeffs,
            scale,
        } = &mut self.repr
        else {
            return 0.0;
        };
        let n = coeffs.len();
        let max_terms = max_terms.max(1);
        if n <= max_terms {
            return 0.0;
        }
        let n_drop = n - max_terms;
        let mut order: Vec<usize> = (0..n).collect();
        order.select_nth_unstable_by(n_drop - 1, |&a, &b| {
            coeffs[a].abs().total_cmp(&coeffs[b].abs()).then(a.cmp(&b))
        });
        let mut drop = vec![false; n];
        for &i in &order[..n_drop] {
            drop[i] = true;
        }
        let d = kernel.input_dim;
        let dropped: Vec<usize> = (0..n).filter(|&i| drop[i]).collect();
        let mut mass = 0.0;
        for (a, &i) in dropped.iter().enumerate() {
            let pi = &points[i * d..(i + 1) * d];
            mass += coeffs[i] * coeffs[i];
            for &j in &dropped[..a] {
                let pj = &points[j * d..(j + 1) * d];
                mass += 2.0 * coeffs[i] * coeffs[j] * kernel.eval_unchecked(pi, pj);
            }
        }
        let mut kept_points = Vec::with_capacity(max_terms * d);
        let mut kept_coeffs = Vec::with_capacity(max_terms);
        for i in 0..n {
            if !drop[i] {
                kept_points.extend_from_slice(&points[i * d..(i + 1) * d]);
                kept_coeffs.push(coeffs[i]);
            }
        }
        *points = kept_points;
        *coeffs = kept_coeffs;
        (mass.max(0.0)).sqrt() * scale.abs()
    }

    /// Replaces the expansion by its RKHS projection onto `keep` of its own
    /// support points, chosen at an even stride so old and recent terms both
    /// survive. Returns `‖f - Pf‖_H`, never more than what dropping the same
    /// terms would lose.
    pub fn compress(&mut self, keep: usize) -> Result<f64> {
        let kernel = self.kernel;
        let Repr::Expansion {
            points,
            coeffs,
            scale,
        } = &mut self.repr
        else {
            return Ok(0.0);
        };
        let n = coeffs.len();
        let keep = keep.max(1);
        if n <= keep {
            return Ok(0.0);
        }
        let d = kernel.input_dim;
        let idx: Vec<usize> = (0..keep).map(|j| j * n / keep).collect();
        let pt = |i: usize| &points[i * d..(i + 1) * d];
        let kmm = DMatrix::from_fn(keep, keep, |a, b| kernel.eval_unchecked(pt(idx[a]), pt(idx[b])));
        let rhs = DVector::from_fn(keep, |a, _| {
            (0..n).map(|i| coeffs[i] * kernel.eval_unchecked(pt(idx[a]), pt(i))).sum::<f64>()
        });
        let mut jitter = 1e-10;
        let alpha = loop {
            let mut reg = kmm.clone();
            for a in 0..keep {
                reg[(a, a)] += jitter;
            }
            if let Some(ch) = reg.cholesky() {
                break ch.solve(&rhs);
            }
            jitter *= 100.0;
            if jitter > 1.0 {
                return Err(Error::Solver("landmark Gram is not positive definite".into()));
            }
        };
        let mut full = 0.0;
        for i in 0..n {
            full += coeffs[i] * coeffs[i];
            for j in 0..i {
                full += 2.0 * coeffs[i] * coeffs[j] * kernel.eval_unchecked(pt(i), pt(j));
            }
        }
        let residual = (full - alpha.dot(&rhs)).max(0.0).sqrt() * scale.abs();
        let new_points: Vec<f64> = idx.iter().flat_map(|&i| pt(i).to_vec()).collect();
        let new_coeffs: Vec<f64> = alpha.iter().copied().collect();
        if new_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::non_finite("compressed coefficients"));
        }
        *points = new_points;
        *coeffs = new_coeffs;
        Ok(residual)
    }

    /// Projects an expansion onto a random-feature model: `β = Σ_i c_i Φ(x_i)`.
    pub fn project_to_features(&self, map: Arc<RandomFeatureMap>) -> Result<Self> {
        let mut out = Self::zero_random_feature(self.kernel, map)?;
        match &self.repr {
            Repr::Expansion { .. } => {
                let pts = self.support_points().expect("expansion");
                out.add_weighted(pts.view(), &self.coefficients())?;
                Ok(out)
            }
            Repr::RandomFeature { .. } => Err(Error::Unsupported(
                "function already uses random features".into(),
            )),
        }
    }
}

/// Truncates a copy of `f`; returns it with the dropped RKHS mass.
pub fn truncate_expansion(f: &RkhsFunction, max_terms: usize) -> (RkhsFunction, f64) {
    let mut out = f.clone();
    let dropped = out.truncate(max_terms);
    (out, dropped)
}

/// Inner step sizes `τ_k = τ₀ / (1 + k/k₀)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub tau0: f64,
    pub k0: f64,
}

impl StepSchedule {
    pub fn new(tau0: f64, k0: f64) -> Result<Self> {
        if !(tau0 > 0.0 && k0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step schedule needs tau0 > 0 and k0 > 0 (got {tau0}, {k0})"
            )));
        }
        Ok(Self { tau0, k0 })
    }

    pub fn constant(tau: f64) -> Self {
        Self {
            tau0: tau,
            k0: f64::MAX,
        }
    }

    pub fn tau(&self, k: u64) -> f64 {
        self.tau0 / (1.0 + k as f64 / self.k0)
    }
}

/// Draws the three point streams consumed by the inner loop, already in the
/// kernel's input coordinates.
pub trait PointSource {
    /// Minibatch from the empirical data distribution.
    fn data_batch(&mut self, n: usize) -> Array2<f64>;
    /// Minibatch from the current dual distribution `q`.
    fn model_batch(&mut self, n: usize) -> Result<Array2<f64>>;
    /// Minibatch from the reference measure `p₀`.
    fn base_batch(&mut self, n: usize) -> Array2<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoopConfig {
    pub iters: usize,
    pub batch: usize,
    pub eta: f64,
    pub lambda: f64,
    pub max_terms: Option<usize>,
}

/// `(f, ν)` together with their step counters.
///
/// `f` and `ν` keep separate counters since the training schedule refines
/// `ν` more often than `f`.
#[derive(Clone, Debug)]
pub struct InnerLoopState {
    pub f: RkhsFunction,
    pub nu: RkhsFunction,
    f_steps: u64,
    nu_steps: u64,
    schedule: StepSchedule,
    dropped_mass: f64,
}

impl InnerLoopState {
    pub fn new(f: RkhsFunction, nu: RkhsFunction, schedule: StepSchedule) -> Result<Self> {
        check_dim(f.input_dim(), nu.input_dim())?;
        Ok(Self {
            f,
            nu,
            f_steps: 0,
            nu_steps: 0,
            schedule,
            dropped_mass: 0.0,
        })
    }

    pub fn f_steps(&self) -> u64 {
        self.f_steps
    }

    pub fn nu_steps(&self) -> u64 {
        self.nu_steps
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule
    }

    /// Total RKHS mass removed by truncation so far.
    pub fn dropped_mass(&self) -> f64 {
        self.dropped_mass
    }

    /// Restarts both step counters, and so the step schedule.
    pub fn reset_steps(&mut self) {
        self.f_steps = 0;
        self.nu_steps = 0;
    }

    pub fn into_functions(self) -> (RkhsFunction, RkhsFunction) {
        (self.f, self.nu)
    }

    /// `f ← (1 - ητ) f + τ (mean k(x_b, ·) - mean k(g_b, ·))`.
    pub fn update_f(
        &mut self,
        data_points: ArrayView2<f64>,
        sampler_points: ArrayView2<f64>,
        eta: f64,
    ) -> Result<()> {
        let tau = self.schedule.tau(self.f_steps);
        let product = tau * eta;
        if !(product < 1.0) {
            return Err(Error::StepSize { product });
        }
        check_dim(self.f.input_dim(), data_points.ncols())?;
        check_dim(self.f.input_dim(), sampler_points.ncols())?;
        self.f.scale_in_place(1.0 - product);
        if data_points.nrows() > 0 {
            let w = tau / data_points.nrows() as f64;
            self.f.add_weighted(data_points, &vec![w; data_points.nrows()])?;
        }
        if sampler_points.nrows() > 0 {
            let w = -tau / sampler_points.nrows() as f64;
            self.f.add_weighted(sampler_points, &vec![w; sampler_points.nrows()])?;
        }
        self.f_steps += 1;
        Ok(())
    }

    /// `ν ← ν + (τ/λ)(mean k(g_b, ·) - mean exp(ν(x'_b)) k(x'_b, ·))`.
    pub fn update_nu(
        &mut self,
        sampler_points: ArrayView2<f64>,
        base_points: ArrayView2<f64>,
        lambda: f64,
    ) -> Result<()> {
        let tau = self.schedule.tau(self.nu_steps);
        check_dim(self.nu.input_dim(), sampler_points.ncols())?;
        check_dim(self.nu.input_dim(), base_points.ncols())?;
        // Random features of the base points serve both the evaluation and
        // the update.
        let base_phi = match &self.nu.repr {
            Repr::RandomFeature { map, .. } => Some(map.feature_matrix(base_points)?),
            Repr::Expansion { .. } => None,
        };
        let nu_at_base = match (&base_phi, &self.nu.repr) {
            (Some(phi), Repr::RandomFeature { beta, .. }) => phi.dot(&ndarray::ArrayView1::from(beta.as_slice())).to_vec(),
            _ => self.nu.eval_rows(base_points)?,
        };
        let mut base_weights = Vec::with_capacity(nu_at_base.len());
        let nb = base_points.nrows().max(1) as f64;
        for v in nu_at_base {
            let e = v.exp();
            if !e.is_finite() {
                return Err(Error::NuDivergence { value: v });
            }
            base_weights.push(-tau / lambda * e / nb);
        }
        if sampler_points.nrows() > 0 {
            let w = tau / lambda / sampler_points.nrows() as f64;
            self.nu.add_weighted(sampler_points, &vec![w; sampler_points.nrows()])?;
        }
        match (&base_phi, &mut self.nu.repr) {
            (Some(phi), Repr::RandomFeature { beta, .. }) => add_features(beta, phi.view(), &base_weights),
            _ => self.nu.add_weighted(base_points, &base_weights)?,
        }
        self.nu_steps += 1;
        Ok(())
    }

    /// Applies the term budget. Once a function exceeds `max_terms` it is
    /// projected onto half as many of its own support points; plain dropping
    /// of small terms loses too much once the step size has decayed.
    pub fn enforce_budget(&mut self, max_terms: Option<usize>) -> Result<()> {
        if let Some(m) = max_terms {
            let keep = (m / 2).max(1);
            if self.f.num_terms() > m {
                self.dropped_mass += self.f.compress(keep)?;
            }
            if self.nu.num_terms() > m {
                self.dropped_mass += self.nu.compress(keep)?;
            }
        }
        Ok(())
    }

    /// One inner iteration: a model batch, a base batch and a data batch feed
    /// one `f` update and one `ν` update.
    pub fn step(&mut self, source: &mut impl PointSource, cfg: &InnerLoopConfig) -> Result<()> {
        let model = source.model_batch(cfg.batch)?;
        let base = source.base_batch(cfg.batch);
        let data = source.data_batch(cfg.batch);
        self.update_f(data.view(), model.view(), cfg.eta)?;
        self.update_nu(model.view(), base.view(), cfg.lambda)?;
        self.enforce_budget(cfg.max_terms)?;
        Ok(())
    }

    /// `cfg.iters` inner iterations.
    pub fn run(&mut self, source: &mut impl PointSource, cfg: &InnerLoopConfig) -> Result<()> {
        if cfg.iters == 0 {
            return Err(Error::InvalidConfig("inner_iters must be >= 1".into()));
        }
        for _ in 0..cfg.iters {
            self.step(source, cfg)?;
        }
        Ok(())
    }
}

/// Runs the inner functional-gradient loop from `(f_init, nu_init)`.
pub fn run_inner_loop(
    f_init: RkhsFunction,
    nu_init: RkhsFunction,
    source: &mut impl PointSource,
    schedule: StepSchedule,
    cfg: &InnerLoopConfig,
) -> Result<(RkhsFunction, RkhsFunction)> {
    let mut state = InnerLoopState::new(f_init, nu_init, schedule)?;
    state.run(source, cfg)?;
    Ok(state.into_functions())
}

/// `β += Φᵀ w`.
fn add_features(beta: &mut [f64], phi: ArrayView2<f64>, weights: &[f64]) {
    let update = phi.t().dot(&ndarray::ArrayView1::from(weights));
    for (b, u) in beta.iter_mut().zip(&update) {
        *b += u;
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Monte-Carlo estimate of the doubly dual objective
/// `Ê_D[f] - E_q[f] - (η/2)‖f‖² + (1/λ)(E_q[ν] - E_{p₀}[exp ν] + 1)`.
///
/// The trailing `+1` makes the value at the optimal `ν` equal to the
/// KL-regularized objective exactly.
pub fn inner_objective(
    f: &RkhsFunction,
    nu: &RkhsFunction,
    data: ArrayView2<f64>,
    model: ArrayView2<f64>,
    base: ArrayView2<f64>,
    eta: f64,
    lambda: f64,
) -> Result<f64> {
    let f_data = mean(&f.eval_rows(data)?);
    let f_model = mean(&f.eval_rows(model)?);
    let nu_model = mean(&nu.eval_rows(model)?);
    let exp_nu: Vec<f64> = nu.eval_rows(base)?.into_iter().map(f64::exp).collect();
    let exp_nu = mean(&exp_nu);
    if !exp_nu.is_finite() {
        return Err(Error::non_finite("E_p0[exp(nu)]"));
    }
    Ok(f_data - f_model - 0.5 * eta * f.rkhs_norm_sq() + (nu_model - exp_nu + 1.0) / lambda)
}
