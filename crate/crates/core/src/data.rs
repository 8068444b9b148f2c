//! Synthetic generators, CSV ingestion, normalization and splitting.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::substream;

pub const RING_RADII: [f64; 3] = [1.0, 3.0, 5.0];
pub const GRID_SD: f64 = 0.1;
/// Two-moons rejection box `[-B, B]²`; the radial factor is 8 sd down at its edge.
pub const MOONS_BOX: f64 = 5.2;
/// Noise sd of the linear-Gaussian conditional benchmark `y = 0.5x + ε`.
pub const LINEAR_GAUSSIAN_NOISE_SD: f64 = 0.5;
pub const LINEAR_GAUSSIAN_SLOPE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Per-column mean and population standard deviation.
    pub fn fit(samples: ArrayView2<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::DegenerateData("normalization needs at least 2 rows".into()));
        }
        let mut mean = Vec::with_capacity(samples.ncols());
        let mut scale = Vec::with_capacity(samples.ncols());
        for (j, col) in samples.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if !(sd > 0.0) {
                return Err(Error::DegenerateData(format!("column {j} is constant")));
            }
            mean.push(m);
            scale.push(sd);
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, samples: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.mean.len(), samples.ncols())?;
        let mut out = samples.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.scale[j]);
        }
        Ok(out)
    }

    pub fn invert(&self, samples: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.mean.len(), samples.ncols())?;
        let mut out = samples.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.scale[j] + self.mean[j]);
        }
        Ok(out)
    }

    /// Normalization restricted to a subset of columns.
    pub fn select(&self, cols: &[usize]) -> Self {
        Self {
            mean: cols.iter().map(|&c| self.mean[c]).collect(),
            scale: cols.iter().map(|&c| self.scale[c]).collect(),
        }
    }

    /// `log |det|` of the map from raw to normalized coordinates over `cols`.
    pub fn log_jacobian(&self, cols: &[usize]) -> f64 {
        -cols.iter().map(|&c| self.scale[c].ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f64>,
    pub columns: Vec<String>,
    pub x_cols: Option<Vec<usize>>,
    pub y_cols: Option<Vec<usize>>,
    /// Statistics the samples were normalized with, if any.
    pub normalization: Option<Normalization>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("dataset samples"));
        }
        let columns = (0..samples.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            samples,
            columns,
            x_cols: None,
            y_cols: None,
            normalization: None,
            seed: None,
        })
    }

    /// Marks columns as conditioning inputs `x` and targets `y`.
    pub fn with_partition(mut self, x_cols: Vec<usize>, y_cols: Vec<usize>) -> Result<Self> {
        let d = self.dim();
        let mut seen = vec![false; d];
        for &c in x_cols.iter().chain(&y_cols) {
            if c >= d || seen[c] {
                return Err(Error::InvalidConfig(format!(
                    "column {c} is out of range or listed twice"
                )));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) || x_cols.is_empty() || y_cols.is_empty() {
            return Err(Error::InvalidConfig(
                "x and y columns must be non-empty and cover every column".into(),
            ));
        }
        self.x_cols = Some(x_cols);
        self.y_cols = Some(y_cols);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_conditional(&self) -> bool {
        self.x_cols.is_some()
    }

    pub fn x(&self) -> Option<Array2<f64>> {
        self.x_cols.as_ref().map(|c| self.samples.select(Axis(1), c))
    }

    pub fn y(&self) -> Option<Array2<f64>> {
        self.y_cols.as_ref().map(|c| self.samples.select(Axis(1), c))
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            samples: self.samples.select(Axis(0), idx),
            ..self.clone()
        }
    }

    /// Normalizes with the given statistics and records them.
    pub fn normalized_with(&self, norm: &Normalization) -> Result<Self> {
        if self.normalization.is_some() {
            return Err(Error::InvalidConfig("dataset is already normalized".into()));
        }
        Ok(Self {
            samples: norm.apply(self.samples.view())?,
            normalization: Some(norm.clone()),
            ..self.clone()
        })
    }

    /// Maps normalized points back to raw coordinates.
    pub fn denormalize(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.normalization {
            Some(n) => n.invert(points),
            None => Ok(points.to_owned()),
        }
    }

    /// Seeded 50/50 split; the first half (rounded up) is the train set.
    pub fn split(&self, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(&mut substream(seed, "split"));
        let n_train = self.n() - self.n() / 2;
        (self.rows(&idx[..n_train]), self.rows(&idx[n_train..]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in self.samples.rows() {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn with_seed(samples: Array2<f64>, seed: u64) -> Dataset {
    let mut ds = Dataset::new(samples).expect("generators emit finite samples");
    ds.seed = Some(seed);
    ds
}

/// Points on three circles of radii 1, 3, 5 with radial noise; extra
/// dimensions are pure noise.
pub fn gen_ring(n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if d < 2 || n < 3 || !(noise_sd >= 0.0) {
        return Err(Error::InvalidConfig("ring needs d >= 2, n >= 3, noise_sd >= 0".into()));
    }
    let mut rng = substream(seed, "ring");
    let mut x = Array2::zeros((n, d));
    for mut row in x.rows_mut() {
        let r = RING_RADII[rng.random_range(0..3)] + noise_sd * normal(&mut rng);
        let theta = rng.random_range(0.0..2.0 * PI);
        row[0] = r * theta.cos();
        row[1] = r * theta.sin();
        for j in 2..d {
            row[j] = noise_sd * normal(&mut rng);
        }
    }
    Ok(with_seed(x, seed))
}

/// Equal mixture of `d` isotropic Gaussians (sd 0.1) centred at the standard
/// basis vectors.
pub fn gen_grid(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if d < 1 || n < 1 {
        return Err(Error::InvalidConfig("grid needs d >= 1 and n >= 1".into()));
    }
    let mut rng = substream(seed, "grid");
    let mut x = Array2::zeros((n, d));
    for mut row in x.rows_mut() {
        let c = rng.random_range(0..d);
        for j in 0..d {
            row[j] = if j == c { 1.0 } else { 0.0 } + GRID_SD * normal(&mut rng);
        }
    }
    Ok(with_seed(x, seed))
}

/// Unnormalized two-moons log density `-U(x)`.
pub fn two_moons_log_density(x: &[f64]) -> f64 {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let a = -0.5 * ((x[0] - 2.0) / 0.6).powi(2);
    let b = -0.5 * ((x[0] + 2.0) / 0.6).powi(2);
    let m = a.max(b);
    -0.5 * ((r - 2.0) / 0.4).powi(2) + m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Gradient of [`two_moons_log_density`].
pub fn two_moons_grad_log_density(x: &[f64]) -> [f64; 2] {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-300);
    let radial = -(r - 2.0) / (0.4 * 0.4 * r);
    let a = -0.5 * ((x[0] - 2.0) / 0.6).powi(2);
    let b = -0.5 * ((x[0] + 2.0) / 0.6).powi(2);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let da = -(x[0] - 2.0) / 0.36;
    let db = -(x[0] + 2.0) / 0.36;
    [radial * x[0] + (ea * da + eb * db) / (ea + eb), radial * x[1]]
}

/// Exact draws from the two-moons density by rejection from a uniform box.
/// The envelope height 1 bounds `exp(-U)` up to a factor `1 + e^{-22}`.
pub fn gen_two_moons(n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::InvalidConfig("two moons needs n >= 1".into()));
    }
    let mut rng = substream(seed, "two_moons");
    let bound = 1.0 + 1e-9;
    let mut x = Array2::zeros((n, 2));
    let mut accepted = 0;
    let mut attempts: u64 = 0;
    while accepted < n {
        attempts += 1;
        let p = [
            rng.random_range(-MOONS_BOX..MOONS_BOX),
            rng.random_range(-MOONS_BOX..MOONS_BOX),
        ];
        if rng.random::<f64>() * bound < two_moons_log_density(&p).exp() {
            x[[accepted, 0]] = p[0];
            x[[accepted, 1]] = p[1];
            accepted += 1;
        }
        if attempts >= 10_000 && (accepted as f64) < 1e-3 * attempts as f64 {
            return Err(Error::Envelope {
                rate: 1.0 - accepted as f64 / attempts as f64,
            });
        }
    }
    Ok(with_seed(x, seed))
}

/// `x ~ N(0, 1)`, `y = 0.5 x + N(0, 0.5²)`; column 0 is `x`, column 1 is `y`.
pub fn gen_linear_gaussian(n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    let mut rng = substream(seed, "linear_gaussian");
    let mut s = Array2::zeros((n, 2));
    for mut row in s.rows_mut() {
        let x = normal(&mut rng);
        row[0] = x;
        row[1] = LINEAR_GAUSSIAN_SLOPE * x + LINEAR_GAUSSIAN_NOISE_SD * normal(&mut rng);
    }
    let mut ds = with_seed(s, seed).with_partition(vec![0], vec![1])?;
    ds.columns = vec!["x".into(), "y".into()];
    Ok(ds)
}

/// Analytic mean NLL of the linear-Gaussian benchmark under its true model.
pub fn linear_gaussian_true_nll() -> f64 {
    let var = LINEAR_GAUSSIAN_NOISE_SD * LINEAR_GAUSSIAN_NOISE_SD;
    0.5 * (2.0 * PI * var).ln() + 0.5
}

/// Reads a numeric CSV with a header row.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let columns: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != columns.len() {
            return Err(Error::Parse {
                row: i + 1,
                column: rec.len(),
                message: format!("expected {} fields", columns.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: j + 1,
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 || columns.is_empty() {
        return Err(Error::DegenerateData(format!("{} has no data rows", path.display())));
    }
    let samples = Array2::from_shape_vec((rows, columns.len()), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut ds = Dataset::new(samples)?;
    ds.columns = columns;
    Ok(ds)
}

/// Loads a CSV, splits it 50/50 and optionally normalizes both halves with
/// statistics fit on the train half.
pub fn load_csv(
    path: &Path,
    x_cols: Option<Vec<usize>>,
    y_cols: Option<Vec<usize>>,
    normalize: bool,
    split_seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut ds = read_csv(path)?;
    match (x_cols, y_cols) {
        (Some(x), Some(y)) => ds = ds.with_partition(x, y)?,
        (None, None) => {}
        _ => {
            return Err(Error::InvalidConfig(
                "x_cols and y_cols must be given together".into(),
            ))
        }
    }
    let (train, test) = ds.split(split_seed);
    if !normalize {
        return Ok((train, test));
    }
    let norm = Normalization::fit(train.samples.view())?;
    Ok((train.normalized_with(&norm)?, test.normalized_with(&norm)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn noiseless_ring_radii_are_exact() {
        let ds = gen_ring(300, 2, 0.0, 1).unwrap();
        for row in ds.samples.rows() {
            let r = row[0].hypot(row[1]);
            assert!(RING_RADII.iter().any(|&c| (r - c).abs() < 1e-12), "radius {r}");
        }
    }

    #[test]
    fn ring_modes_have_binomial_counts() {
        let ds = gen_ring(3000, 2, 0.1, 2).unwrap();
        let mut counts = [0usize; 3];
        for row in ds.samples.rows() {
            let r = row[0].hypot(row[1]);
            counts[if r < 2.0 { 0 } else if r < 4.0 { 1 } else { 2 }] += 1;
        }
        let band = 4.0 * (1000.0f64 * 2.0 / 3.0).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= band, "{counts:?}");
        }
    }

    #[test]
    fn ring_extra_dims_are_noise() {
        let ds = gen_ring(3000, 4, 0.1, 3).unwrap();
        for j in 2..4 {
            let col = ds.samples.column(j);
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2999.0).sqrt();
            assert!((0.08..=0.12).contains(&sd), "sd {sd}");
        }
    }

    #[test]
    fn grid_one_dim_moments() {
        let ds = gen_grid(2000, 1, 4).unwrap();
        let m = ds.samples.mean().unwrap();
        assert!((m - 1.0).abs() <= 3.0 * 0.1 / 2000f64.sqrt(), "mean {m}");
    }

    #[test]
    fn grid_assignment_counts() {
        let ds = gen_grid(4000, 2, 5).unwrap();
        let first = ds.samples.rows().into_iter().filter(|r| r[0] > r[1]).count() as f64;
        let band = 3.0 * (4000.0f64 * 0.25).sqrt();
        assert!((first - 2000.0).abs() <= band);
        assert_eq!(gen_grid(50, 3, 6).unwrap(), gen_grid(50, 3, 6).unwrap());
    }

    #[test]
    fn two_moons_support_and_symmetry() {
        let ds = gen_two_moons(5000, 7).unwrap();
        let mut right = 0usize;
        for row in ds.samples.rows() {
            let r = row[0].hypot(row[1]);
            assert!((0.4..=3.6).contains(&r), "radius {r}");
            if row[0] > 0.0 {
                right += 1;
            }
        }
        assert!((right as f64 - 2500.0).abs() <= 3.0 * (5000.0f64 * 0.25).sqrt());
    }

    /// Quadrature of `exp(-U)` over a grid of cells with `sub × sub` midpoints each.
    fn moons_cell_probs(bins: usize, lo: f64, hi: f64, sub: usize) -> Vec<f64> {
        let w = (hi - lo) / bins as f64;
        let h = w / sub as f64;
        let mut p = vec![0.0; bins * bins];
        for i in 0..bins {
            for j in 0..bins {
                let mut s = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let x = lo + i as f64 * w + (a as f64 + 0.5) * h;
                        let y = lo + j as f64 * w + (b as f64 + 0.5) * h;
                        s += two_moons_log_density(&[x, y]).exp();
                    }
                }
                p[i * bins + j] = s * h * h;
            }
        }
        let z: f64 = p.iter().sum();
        p.iter().map(|v| v / z).collect()
    }

    fn cell_counts(ds: &Dataset, bins: usize, lo: f64, hi: f64) -> Vec<f64> {
        let w = (hi - lo) / bins as f64;
        let mut c = vec![0.0; bins * bins];
        for row in ds.samples.rows() {
            let i = ((row[0] - lo) / w).floor();
            let j = ((row[1] - lo) / w).floor();
            if i >= 0.0 && j >= 0.0 && (i as usize) < bins && (j as usize) < bins {
                c[i as usize * bins + j as usize] += 1.0;
            }
        }
        c
    }

    #[test]
    fn two_moons_histogram_matches_quadrature() {
        let n = 20_000;
        let ds = gen_two_moons(n, 8).unwrap();
        let p = moons_cell_probs(40, -4.0, 4.0, 4);
        let c = cell_counts(&ds, 40, -4.0, 4.0);
        let tv: f64 = 0.5 * p.iter().zip(&c).map(|(p, c)| (p - c / n as f64).abs()).sum::<f64>();
        assert!(tv <= 0.08, "tv {tv}");
    }

    #[test]
    fn two_moons_chi_square_goodness_of_fit() {
        // Fine cells are pooled in probability order into 100 bins of
        // roughly equal mass, so every expected count is about 200.
        let n = 20_000;
        let ds = gen_two_moons(n, 9).unwrap();
        let p = moons_cell_probs(80, -4.0, 4.0, 3);
        let c = cell_counts(&ds, 80, -4.0, 4.0);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let (mut acc_p, mut acc_c) = (0.0, 0.0);
        for &i in &order {
            acc_p += p[i];
            acc_c += c[i];
            if acc_p >= 0.01 {
                bins.push((acc_p, acc_c));
                acc_p = 0.0;
                acc_c = 0.0;
            }
        }
        if let Some(last) = bins.last_mut() {
            last.0 += acc_p;
            last.1 += acc_c;
        }
        let total_c: f64 = c.iter().sum();
        let stat: f64 = bins
            .iter()
            .map(|(p, c)| {
                let e = p * total_c;
                assert!(e >= 20.0);
                (c - e).powi(2) / e
            })
            .sum();
        // 99th percentile of χ² with k-1 dof via Wilson-Hilferty.
        let k = (bins.len() - 1) as f64;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + 2.326 * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(bins.len() >= 90);
        assert!(stat <= crit, "chi2 {stat} > {crit} with {k} dof");
    }

    #[test]
    fn two_moons_gradient_matches_finite_differences() {
        for p in [[1.3, 0.7], [-2.1, -0.4], [0.2, 1.9], [3.0, -1.0]] {
            let g = two_moons_grad_log_density(&p);
            for j in 0..2 {
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[j] += h;
                b[j] -= h;
                let fd = (two_moons_log_density(&a) - two_moons_log_density(&b)) / (2.0 * h);
                assert_abs_diff_eq!(g[j], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn linear_gaussian_partition_and_truth() {
        let ds = gen_linear_gaussian(10, 1).unwrap();
        assert_eq!(ds.x().unwrap().ncols(), 1);
        assert_eq!(ds.y().unwrap().ncols(), 1);
        assert_abs_diff_eq!(linear_gaussian_true_nll(), 0.725_791_352_644_727_9, epsilon = 1e-12);
    }

    #[test]
    fn partitions_must_cover_columns() {
        let ds = Dataset::new(Array2::zeros((3, 3))).unwrap();
        assert!(ds.clone().with_partition(vec![0], vec![1]).is_err());
        assert!(ds.clone().with_partition(vec![0, 1], vec![1, 2]).is_err());
        assert!(ds.with_partition(vec![0, 2], vec![1]).is_ok());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn four_row_csv_splits_two_two() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n7,8\n");
        let (tr, te) = load_csv(f.path(), None, None, false, 3).unwrap();
        assert_eq!((tr.n(), te.n()), (2, 2));
        let mut all: Vec<f64> = tr.samples.iter().chain(te.samples.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (tr2, _) = load_csv(f.path(), None, None, false, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(tr.columns, vec!["a", "b"]);
    }

    #[test]
    fn normalized_train_is_standardized() {
        let mut s = String::from("x,y\n");
        for i in 0..40 {
            s.push_str(&format!("{},{}\n", i as f64 * 0.3 + 2.0, (i * i) as f64));
        }
        let f = write_tmp(&s);
        let (tr, te) = load_csv(f.path(), Some(vec![0]), Some(vec![1]), true, 1).unwrap();
        for col in tr.samples.axis_iter(Axis(1)) {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() <= 1e-9);
            assert_abs_diff_eq!(sd, 1.0, epsilon = 1e-12);
        }
        assert_eq!(tr.normalization, te.normalization);
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let f = write_tmp("a,b\n1,2\n3,oops\n");
        match read_csv(f.path()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let empty = write_tmp("a,b\n");
        assert!(read_csv(empty.path()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_ring(20, 3, 0.1, 4).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        let back = read_csv(f.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn ring_median_bandwidth_matches_brute_force() {
        let ds = gen_ring(500, 2, 0.1, 11).unwrap();
        let x = &ds.samples;
        let mut d2 = Vec::new();
        for i in 0..500 {
            for j in 0..i {
                d2.push((x[[i, 0]] - x[[j, 0]]).powi(2) + (x[[i, 1]] - x[[j, 1]]).powi(2));
            }
        }
        d2.sort_by(f64::total_cmp);
        let m = d2.len();
        let brute = if m % 2 == 1 { d2[m / 2] } else { 0.5 * (d2[m / 2 - 1] + d2[m / 2]) };
        let got = crate::kernel::median_bandwidth(x.view()).unwrap();
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12 * brute);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = substream(seed, "prop");
            let x = Array2::from_shape_fn((17, 3), |_| scale * normal(&mut rng) + 5.0);
            let norm = Normalization::fit(x.view()).unwrap();
            let back = norm.invert(norm.apply(x.view()).unwrap().view()).unwrap();
            for (a, b) in back.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn generators_are_deterministic_and_finite(seed in 0u64..200) {
            let a = gen_two_moons(50, seed).unwrap();
            prop_assert_eq!(&a, &gen_two_moons(50, seed).unwrap());
            prop_assert!(a.samples.iter().all(|v| v.is_finite()));
            let r = gen_ring(30, 3, 0.1, seed).unwrap();
            prop_assert_eq!(&r, &gen_ring(30, 3, 0.1, seed).unwrap());
        }
    }
}
