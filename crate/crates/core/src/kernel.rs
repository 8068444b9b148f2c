//! Gaussian RBF kernel `k(x, y) = exp(-‖x - y‖² / σ²)`.
//!
//! Note the absence of a factor 2 in the denominator: `bandwidth_sq` is σ²
//! itself, which is exactly what [`median_bandwidth`] returns.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wide::f64x4;

use crate::error::{check_dim, Error, Result};

/// Subsample size used by the median heuristic on large inputs.
pub const MEDIAN_SUBSAMPLE_CAP: usize = 2000;

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth_sq: f64,
    pub input_dim: usize,
}

impl KernelSpec {
    pub fn new(bandwidth_sq: f64, input_dim: usize) -> Result<Self> {
        if !(bandwidth_sq > 0.0 && bandwidth_sq.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth_sq must be positive and finite, got {bandwidth_sq}"
            )));
        }
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        Ok(Self {
            bandwidth_sq,
            input_dim,
        })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.input_dim, x.len())?;
        check_dim(self.input_dim, y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / self.bandwidth_sq).exp()
    }

    /// `∂k(x, y)/∂x = -(2/σ²)(x - y) k(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let k = self.eval(x, y)?;
        let c = -2.0 / self.bandwidth_sq * k;
        Ok(x.iter().zip(y).map(|(a, b)| c * (a - b)).collect())
    }

    /// Gram matrix over the rows of `points`.
    pub fn gram(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim, points.ncols())?;
        let n = points.nrows();
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            let xi = points.row(i);
            let xi = xi.as_slice().expect("row-major rows");
            g[[i, i]] = 1.0;
            for j in 0..i {
                let v = self.eval_unchecked(xi, points.row(j).as_slice().expect("row-major rows"));
                g[[i, j]] = v;
                g[[j, i]] = v;
            }
        }
        Ok(g)
    }
}

/// Median of the pairwise squared distances, used as σ².
///
/// Inputs with more than [`MEDIAN_SUBSAMPLE_CAP`] rows use a fixed-seed
/// subsample of that size.
pub fn median_bandwidth(samples: ArrayView2<f64>) -> Result<f64> {
    median_bandwidth_with(samples, MEDIAN_SUBSAMPLE_CAP, 0)
}

pub fn median_bandwidth_with(samples: ArrayView2<f64>, cap: usize, seed: u64) -> Result<f64> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::DegenerateData(
            "median heuristic needs at least two samples".into(),
        ));
    }
    let rows: Vec<usize> = if n > cap.max(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, cap.max(2)).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let owned = samples.as_standard_layout();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        let xi = owned.row(i);
        let xi = xi.as_slice().expect("standard layout");
        for &j in &rows[..a] {
            dists.push(sq_dist(xi, owned.row(j).as_slice().expect("standard layout")));
        }
    }
    if dists.iter().any(|d| !d.is_finite()) {
        return Err(Error::non_finite("median heuristic input"));
    }
    let m = dists.len();
    dists.sort_unstable_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        return Ok(median);
    }
    // Heavily tied data: fall back to the median of the nonzero distances.
    let nonzero: Vec<f64> = dists.into_iter().filter(|d| *d > 0.0).collect();
    match nonzero.len() {
        0 => Err(Error::DegenerateData(
            "all pairwise distances are zero".into(),
        )),
        k => Ok(nonzero[k / 2]),
    }
}

/// Random Fourier features `Φ_i(x) = √(2/r) cos(ω_i·x + b_i)` for the RBF kernel.
///
/// With `ω ~ N(0, (2/σ²) I)` and `b ~ U[0, 2π)`, `E[Φ(x)·Φ(y)] = k(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapRepr", into = "FeatureMapRepr")]
pub struct RandomFeatureMap {
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    scale: f64,
    input_dim: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct FeatureMapRepr {
    frequencies: Vec<Vec<f64>>,
    phases: Vec<f64>,
    scale: f64,
    seed: u64,
}

impl From<RandomFeatureMap> for FeatureMapRepr {
    fn from(m: RandomFeatureMap) -> Self {
        let d = m.input_dim;
        FeatureMapRepr {
            frequencies: m.frequencies.chunks(d).map(<[f64]>::to_vec).collect(),
            phases: m.phases,
            scale: m.scale,
            seed: m.seed,
        }
    }
}

impl TryFrom<FeatureMapRepr> for RandomFeatureMap {
    type Error = Error;

    fn try_from(r: FeatureMapRepr) -> Result<Self> {
        let input_dim = r.frequencies.first().map_or(0, Vec::len);
        if input_dim == 0 || r.frequencies.len() != r.phases.len() {
            return Err(Error::ShapeMismatch(
                "feature map frequencies/phases disagree".into(),
            ));
        }
        if r.frequencies.iter().any(|w| w.len() != input_dim) {
            return Err(Error::ShapeMismatch("ragged frequency matrix".into()));
        }
        Ok(RandomFeatureMap {
            frequencies: r.frequencies.concat(),
            phases: r.phases,
            scale: r.scale,
            input_dim,
            seed: r.seed,
        })
    }
}

/// Draws `r` random features matching `spec`. Deterministic in `seed`.
pub fn sample_feature_map(spec: &KernelSpec, r: usize, seed: u64) -> Result<RandomFeatureMap> {
    if r == 0 {
        return Err(Error::InvalidConfig("feature count must be >= 1".into()));
    }
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / spec.bandwidth_sq).sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut frequencies = Vec::with_capacity(r * d);
    let mut phases = Vec::with_capacity(r);
    for _ in 0..r {
        for _ in 0..d {
            frequencies.push(normal.sample(&mut rng));
        }
        phases.push(rng.random::<f64>() * 2.0 * PI);
    }
    Ok(RandomFeatureMap {
        frequencies,
        phases,
        scale: (2.0 / r as f64).sqrt(),
        input_dim: d,
        seed,
    })
}

impl RandomFeatureMap {
    pub fn num_features(&self) -> usize {
        self.phases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn frequency(&self, i: usize) -> &[f64] {
        &self.frequencies[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub(crate) fn phase(&self, i: usize) -> f64 {
        self.phases[i]
    }

    pub(crate) fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    fn projection(&self, i: usize, x: &[f64]) -> f64 {
        let w = &self.frequencies[i * self.input_dim..(i + 1) * self.input_dim];
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.phases[i]
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        let mut out = vec![0.0; self.num_features()];
        self.features_into(x, &mut out);
        Ok(out)
    }

    /// `Φ(x_i)` for every row, as an `n × r` matrix.
    pub fn feature_matrix(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim, points.ncols())?;
        let omega = ArrayView2::from_shape((self.num_features(), self.input_dim), &self.frequencies)
            .expect("frequency matrix is r x d");
        let mut z = Array2::zeros((points.nrows(), self.num_features()));
        ndarray::linalg::general_mat_mul(1.0, &points, &omega.t(), 0.0, &mut z);
        let scale = f64x4::splat(self.scale);
        for mut row in z.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            let mut chunks = row.chunks_exact_mut(4);
            let mut phases = self.phases.chunks_exact(4);
            for (v, b) in (&mut chunks).zip(&mut phases) {
                let c = (f64x4::from(&*v) + f64x4::from(b)).cos() * scale;
                v.copy_from_slice(&c.to_array());
            }
            for (v, b) in chunks.into_remainder().iter_mut().zip(phases.remainder()) {
                *v = self.scale * (*v + b).cos();
            }
        }
        Ok(z)
    }

    pub(crate) fn features_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.scale * self.projection(i, x).cos();
        }
    }

    /// `β·Φ(x)` and its gradient in `x`.
    pub(crate) fn linear_value_grad(&self, beta: &[f64], x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        let d = self.input_dim;
        let r = beta.len();
        let mut proj = [0.0; 4];
        for start in (0..r).step_by(4) {
            let lanes = (r - start).min(4);
            for (k, p) in proj.iter_mut().enumerate() {
                *p = if k < lanes { self.projection(start + k, x) } else { 0.0 };
            }
            let (s, c) = f64x4::from(proj).sin_cos();
            let (s, c) = (s.to_array(), c.to_array());
            for k in 0..lanes {
                let i = start + k;
                let b = beta[i];
                value += b * c[k];
                let w = &self.frequencies[i * d..(i + 1) * d];
                for (g, wj) in grad.iter_mut().zip(w) {
                    *g -= b * s[k] * wj;
                }
            }
        }
        grad.iter_mut().for_each(|g| *g *= self.scale);
        value * self.scale
    }

    pub(crate) fn linear_value(&self, beta: &[f64], x: &[f64]) -> f64 {
        let mut value = 0.0;
        for (i, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                value += b * self.projection(i, x).cos();
            }
        }
        value * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn eval_examples() {
        let k1 = KernelSpec::new(1.0, 1).unwrap();
        assert_eq!(k1.eval(&[0.0], &[0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(k1.eval(&[0.0], &[1.0]).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        let k4 = KernelSpec::new(4.0, 2).unwrap();
        assert_abs_diff_eq!(
            k4.eval(&[1.0, 1.0], &[3.0, 1.0]).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = KernelSpec::new(1.0, 2).unwrap();
        assert!(matches!(
            k.eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(k.grad_x(&[0.0, 0.0], &[0.0]).is_err());
        assert!(KernelSpec::new(0.0, 1).is_err());
    }

    #[test]
    fn grad_examples() {
        let k = KernelSpec::new(1.0, 1).unwrap();
        assert_eq!(k.grad_x(&[0.3], &[0.3]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(
            k.grad_x(&[1.0], &[0.0]).unwrap()[0],
            -2.0 * (-1.0f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..100 {
            let d = rng.random_range(1..4);
            let k = KernelSpec::new(rng.random_range(0.3..4.0), d).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = k.grad_x(&x, &y).unwrap();
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (k.eval(&xp, &y).unwrap() - k.eval(&xm, &y).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6, "fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(array![[0.0], [1.0]].view()).unwrap(), 1.0);
        assert_eq!(median_bandwidth(array![[0.0], [1.0], [3.0]].view()).unwrap(), 4.0);
        assert!(matches!(
            median_bandwidth(array![[1.0], [1.0], [1.0]].view()),
            Err(Error::DegenerateData(_))
        ));
        assert!(median_bandwidth(array![[1.0]].view()).is_err());
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = Array2::from_shape_fn((64, 3), |_| rng.random_range(-1.5..1.5));
        let k = KernelSpec::new(0.7, 3).unwrap();
        let g = k.gram(pts.view()).unwrap();
        let m = nalgebra::DMatrix::from_fn(64, 64, |i, j| g[[i, j]]);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-8), "min eig {}", eig.min());
        for i in 0..64 {
            assert_eq!(g[[i, i]], 1.0);
            for j in 0..64 {
                assert_eq!(g[[i, j]], g[[j, i]]);
                assert!(g[[i, j]] > 0.0 && g[[i, j]] <= 1.0);
            }
        }
    }

    #[test]
    fn feature_map_is_deterministic() {
        let k = KernelSpec::new(1.3, 2).unwrap();
        let a = sample_feature_map(&k, 64, 9).unwrap();
        let b = sample_feature_map(&k, 64, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features(&[0.1, 0.2]).unwrap().len(), 64);
        assert!(sample_feature_map(&k, 0, 9).is_err());
    }

    #[test]
    fn feature_map_serde_round_trip() {
        let k = KernelSpec::new(1.3, 2).unwrap();
        let a = sample_feature_map(&k, 8, 1).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"frequencies\":[["));
        let b: RandomFeatureMap = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_map_approximates_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = KernelSpec::new(1.0, 2).unwrap();
        let map = sample_feature_map(&k, 4096, 21).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let y = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let fx = map.features(&x).unwrap();
            let fy = map.features(&y).unwrap();
            let approx: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
            worst = worst.max((approx - k.eval(&x, &y).unwrap()).abs());
        }
        assert!(worst <= 0.05, "max error {worst}");
    }

    fn mean_sq_error(r: usize, seed: u64, pairs: &[([f64; 2], [f64; 2])], k: &KernelSpec) -> f64 {
        let map = sample_feature_map(k, r, seed).unwrap();
        pairs
            .iter()
            .map(|(x, y)| {
                let fx = map.features(x).unwrap();
                let fy = map.features(y).unwrap();
                let a: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
                (a - k.eval(x, y).unwrap()).powi(2)
            })
            .sum::<f64>()
            / pairs.len() as f64
    }

    #[test]
    fn doubling_features_halves_mean_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let k = KernelSpec::new(1.0, 2).unwrap();
        let pairs: Vec<_> = (0..40)
            .map(|_| {
                (
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                )
            })
            .collect();
        let seeds = 0..24u64;
        let small: f64 = seeds.clone().map(|s| mean_sq_error(128, s, &pairs, &k)).sum();
        let large: f64 = seeds.map(|s| mean_sq_error(256, 1000 + s, &pairs, &k)).sum();
        let ratio = large / small;
        assert!((0.35..0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn feature_products_are_unbiased() {
        let k = KernelSpec::new(0.8, 2).unwrap();
        let x = [0.2, -0.4];
        let y = [-0.5, 0.3];
        let vals: Vec<f64> = (0..50)
            .map(|s| {
                let m = sample_feature_map(&k, 64, s).unwrap();
                let fx = m.features(&x).unwrap();
                let fy = m.features(&y).unwrap();
                fx.iter().zip(&fy).map(|(a, b)| a * b).sum()
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let truth = k.eval(&x, &y).unwrap();
        assert!((mean - truth).abs() <= 3.0 * sd / n.sqrt());
    }

    #[test]
    fn linear_value_grad_matches_finite_differences() {
        let k = KernelSpec::new(0.9, 3).unwrap();
        let map = sample_feature_map(&k, 32, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let beta: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.3, -0.2, 0.5];
        let mut g = [0.0; 3];
        let v = map.linear_value_grad(&beta, &x, &mut g);
        assert_abs_diff_eq!(v, map.linear_value(&beta, &x), epsilon = 1e-12);
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += 1e-5;
            xm[j] -= 1e-5;
            let fd = (map.linear_value(&beta, &xp) - map.linear_value(&beta, &xm)) / 2e-5;
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn kernel_is_symmetric_and_bounded(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            bw in 0.1f64..10.0,
        ) {
            let k = KernelSpec::new(bw, 3).unwrap();
            let a = k.eval(&x, &y).unwrap();
            proptest::prop_assert_eq!(a, k.eval(&y, &x).unwrap());
            proptest::prop_assert!(a >= 0.0 && a <= 1.0);
            proptest::prop_assert_eq!(k.eval(&x, &x).unwrap(), 1.0);
        }
    }
}
