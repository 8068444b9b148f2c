//! Transport-map sampler `x = g(ξ)`, `ξ ~ N(0, I)`: a tanh MLP with a linear
//! output layer, trained by backpropagating the dual gradient
//! `-∇f(g(ξ)) + (1/λ)∇ν(g(ξ))` into its weights.
//!
//! In conditional mode the network consumes `[x, ξ]` and emits `y`.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rkhs::RkhsFunction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerArch {
    pub noise_dim: usize,
    pub hidden_width: usize,
    /// Number of affine layers, output layer included.
    pub depth: usize,
    #[serde(default)]
    pub cond_dim: usize,
}

impl Default for SamplerArch {
    fn default() -> Self {
        Self {
            noise_dim: 128,
            hidden_width: 128,
            depth: 3,
            cond_dim: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct NoiseStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PartialEq for NoiseStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplerRepr", into = "SamplerRepr")]
pub struct TransportSampler {
    layers: Vec<Layer>,
    cond_dim: usize,
    noise_dim: usize,
    noise: NoiseStream,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct NoiseRepr {
    seed: u64,
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct SamplerRepr {
    cond_dim: usize,
    noise_dim: usize,
    output_dim: usize,
    layers: Vec<LayerRepr>,
    noise_stream: NoiseRepr,
}

impl From<TransportSampler> for SamplerRepr {
    fn from(s: TransportSampler) -> Self {
        SamplerRepr {
            cond_dim: s.cond_dim,
            noise_dim: s.noise_dim,
            output_dim: s.output_dim(),
            noise_stream: NoiseRepr {
                seed: s.noise.seed,
                word_pos: s.noise.rng.get_word_pos(),
            },
            layers: s
                .layers
                .into_iter()
                .map(|l| LayerRepr {
                    weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

impl TryFrom<SamplerRepr> for TransportSampler {
    type Error = Error;

    fn try_from(r: SamplerRepr) -> Result<Self> {
        let mut layers = Vec::with_capacity(r.layers.len());
        for l in r.layers {
            let rows = l.weights.len();
            let cols = l.weights.first().map_or(0, Vec::len);
            if l.weights.iter().any(|w| w.len() != cols) {
                return Err(Error::ShapeMismatch("ragged weight matrix".into()));
            }
            let weights = Array2::from_shape_vec((rows, cols), l.weights.concat())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            layers.push(Layer {
                weights,
                bias: Array1::from(l.bias),
                activation: l.activation,
            });
        }
        let mut s = TransportSampler::from_layers(layers, r.cond_dim, r.noise_stream.seed)?;
        check_dim(r.noise_dim, s.noise_dim)?;
        check_dim(r.output_dim, s.output_dim())?;
        s.noise.rng.set_word_pos(r.noise_stream.word_pos);
        Ok(s)
    }
}

/// Per-layer weight and bias gradients, shaped like the sampler's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<LayerGradient>,
}

impl ParamGradient {
    pub fn zeros_like(sampler: &TransportSampler) -> Self {
        Self {
            layers: sampler
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn add(&mut self, other: &ParamGradient) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.dim() != b.weights.dim() || a.bias.len() != b.bias.len() {
                return Err(Error::ShapeMismatch("gradient layer shapes differ".into()));
            }
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        Ok(())
    }

    /// All entries flattened layer by layer, weights before bias.
    pub fn to_vec(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Forward-pass activations kept for backpropagation.
pub struct Trace {
    /// Input to each layer, then the final output.
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty trace")
    }
}

impl TransportSampler {
    /// Glorot-uniform weights, zero biases, tanh hidden layers, linear output.
    pub fn new(arch: &SamplerArch, output_dim: usize, init_seed: u64, noise_seed: u64) -> Result<Self> {
        if arch.depth == 0 || arch.noise_dim == 0 || arch.hidden_width == 0 || output_dim == 0 {
            return Err(Error::InvalidConfig(
                "sampler depth, widths and output_dim must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut layers = Vec::with_capacity(arch.depth);
        let mut fan_in = arch.cond_dim + arch.noise_dim;
        for l in 0..arch.depth {
            let last = l + 1 == arch.depth;
            let fan_out = if last { output_dim } else { arch.hidden_width };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let weights = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng));
            layers.push(Layer {
                weights,
                bias: Array1::zeros(fan_out),
                activation: if last { Activation::Linear } else { Activation::Tanh },
            });
            fan_in = fan_out;
        }
        Self::from_layers(layers, arch.cond_dim, noise_seed)
    }

    /// Builds a sampler from explicit layers; the first layer consumes
    /// `cond_dim + noise_dim` inputs.
    pub fn from_layers(layers: Vec<Layer>, cond_dim: usize, noise_seed: u64) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("sampler needs at least one layer".into()))?;
        let in_dim = first.weights.ncols();
        if in_dim <= cond_dim {
            return Err(Error::ShapeMismatch(format!(
                "first layer consumes {in_dim} inputs, conditioning alone uses {cond_dim}"
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::ShapeMismatch(format!("layer {i}: bias/weight rows differ")));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} consumes {} inputs, previous layer emits {}",
                    l.weights.ncols(),
                    layers[i - 1].weights.nrows()
                )));
            }
        }
        Ok(Self {
            noise_dim: in_dim - cond_dim,
            layers,
            cond_dim,
            noise: NoiseStream::new(noise_seed),
        })
    }

    /// Single linear layer `x = A ξ + b`.
    pub fn affine(a: Array2<f64>, b: Array1<f64>, noise_seed: u64) -> Result<Self> {
        Self::from_layers(
            vec![Layer {
                weights: a,
                bias: b,
                activation: Activation::Linear,
            }],
            0,
            noise_seed,
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Replaces the noise stream, e.g. for an independent evaluation copy.
    pub fn reseed_noise(&mut self, seed: u64) {
        self.noise = NoiseStream::new(seed);
    }

    pub fn draw_noise(&mut self, n: usize) -> Array2<f64> {
        let rng = &mut self.noise.rng;
        Array2::from_shape_fn((n, self.noise_dim), |_| StandardNormal.sample(rng))
    }

    /// Network input rows `[cond, ξ]`.
    pub fn inputs(&self, cond: Option<ArrayView2<f64>>, noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.noise_dim, noise.ncols())?;
        match cond {
            None if self.cond_dim == 0 => Ok(noise.to_owned()),
            None => Err(Error::DimensionMismatch {
                expected: self.cond_dim,
                got: 0,
            }),
            Some(c) => {
                check_dim(self.cond_dim, c.ncols())?;
                if c.nrows() != noise.nrows() {
                    return Err(Error::ShapeMismatch("condition and noise row counts differ".into()));
                }
                Ok(concatenate![Axis(1), c, noise])
            }
        }
    }

    pub fn forward_trace(&self, inputs: ArrayView2<f64>) -> Result<Trace> {
        check_dim(self.cond_dim + self.noise_dim, inputs.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights.t());
            z += &layer.bias;
            if layer.activation == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("sampler layer {i} forward")));
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(inputs)?.activations.pop().expect("non-empty"))
    }

    /// `n` unconditional draws, advancing the noise stream.
    pub fn sample(&mut self, n: usize) -> Result<Array2<f64>> {
        if self.cond_dim > 0 {
            return Err(Error::Unsupported(
                "conditional sampler needs conditioning inputs".into(),
            ));
        }
        let noise = self.draw_noise(n);
        self.forward(noise.view())
    }

    /// One draw of `y | x` per row of `cond`.
    pub fn sample_conditional(&mut self, cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let noise = self.draw_noise(cond.nrows());
        let inputs = self.inputs(Some(cond), noise.view())?;
        self.forward(inputs.view())
    }

    /// Gradient of `(1/n) Σ_i upstream_i · g(input_i)` with respect to the
    /// parameters.
    pub fn backprop(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<ParamGradient> {
        let n = trace.activations[0].nrows();
        if upstream.dim() != (n, self.output_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {:?}, expected ({n}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let inv_n = 1.0 / n.max(1) as f64;
        let mut delta = upstream.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Tanh {
                let h = &trace.activations[i + 1];
                ndarray::Zip::from(&mut delta).and(h).for_each(|d, &h| *d *= 1.0 - h * h);
            }
            let input = &trace.activations[i];
            let mut gw = delta.t().dot(input);
            gw *= inv_n;
            let gb = delta.sum_axis(Axis(0)) * inv_n;
            if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("sampler layer {i} gradient")));
            }
            if i > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push(LayerGradient {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(ParamGradient { layers: grads })
    }

    /// `w ← w - step · clip(grad)`; the gradient is rescaled to norm
    /// `clip_norm` when larger. Returns the norm of the applied gradient.
    pub fn apply_update(&mut self, grad: &ParamGradient, step: f64, clip_norm: f64) -> Result<f64> {
        if grad.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("gradient/sampler layer counts differ".into()));
        }
        for (i, (l, g)) in self.layers.iter().zip(&grad.layers).enumerate() {
            if l.weights.dim() != g.weights.dim() || l.bias.len() != g.bias.len() {
                return Err(Error::ShapeMismatch(format!("layer {i} gradient shape")));
            }
        }
        let norm = grad.norm();
        if !norm.is_finite() {
            return Err(Error::non_finite("sampler gradient norm"));
        }
        let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        let alpha = step * factor;
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.scaled_add(-alpha, &g.weights);
            l.bias.scaled_add(-alpha, &g.bias);
        }
        Ok(norm * factor)
    }
}

/// Dual gradient with noise drawn from the sampler's own stream.
pub fn dual_gradient(
    sampler: &mut TransportSampler,
    f: &RkhsFunction,
    nu: &RkhsFunction,
    lambda: f64,
    batch: usize,
) -> Result<ParamGradient> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch must be >= 1".into()));
    }
    let noise = sampler.draw_noise(batch);
    let inputs = sampler.inputs(None, noise.view())?;
    dual_gradient_at(sampler, f, nu, lambda, inputs.view())
}

/// Dual gradient `E[-∇_w f(g(ξ)) + (1/λ) ∇_w ν(g(ξ))]` over fixed inputs.
pub fn dual_gradient_at(
    sampler: &TransportSampler,
    f: &RkhsFunction,
    nu: &RkhsFunction,
    lambda: f64,
    inputs: ArrayView2<f64>,
) -> Result<ParamGradient> {
    check_dim(sampler.output_dim(), f.input_dim())?;
    check_dim(sampler.output_dim(), nu.input_dim())?;
    if let Some(witness) = f.linear_combination(-1.0, nu, 1.0 / lambda) {
        return backprop_witness(sampler, inputs, |_, y, out| {
            witness.value_grad_unchecked(y, out);
            Ok(())
        });
    }
    backprop_witness(sampler, inputs, |_, y, out| {
        let mut gn = vec![0.0; y.len()];
        f.value_grad_unchecked(y, out);
        nu.value_grad_unchecked(y, &mut gn);
        for (o, n) in out.iter_mut().zip(&gn) {
            *o = -*o + n / lambda;
        }
        Ok(())
    })
}

/// Backpropagates an output-space gradient field into the sampler
/// parameters, averaging over inputs. `field(i, g(input_i), v)` writes the
/// field at row `i` into `v`.
pub fn backprop_witness(
    sampler: &TransportSampler,
    inputs: ArrayView2<f64>,
    mut field: impl FnMut(usize, &[f64], &mut [f64]) -> Result<()>,
) -> Result<ParamGradient> {
    let trace = sampler.forward_trace(inputs)?;
    let out = trace.output();
    let mut upstream = Array2::zeros(out.raw_dim());
    for (i, (row, mut up)) in out.rows().into_iter().zip(upstream.rows_mut()).enumerate() {
        let y = row.to_vec();
        let mut v = vec![0.0; y.len()];
        field(i, &y, &mut v)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("dual gradient field"));
        }
        up.assign(&Array1::from(v));
    }
    sampler.backprop(&trace, upstream.view())
}

/// `mean(-f(g(input)) + ν(g(input))/λ)`: the sampler-dependent part of the
/// saddle objective.
pub fn dual_objective_at(
    sampler: &TransportSampler,
    f: &RkhsFunction,
    nu: &RkhsFunction,
    lambda: f64,
    inputs: ArrayView2<f64>,
) -> Result<f64> {
    let out = sampler.forward(inputs)?;
    let fv = f.eval_rows(out.view())?;
    let nv = nu.eval_rows(out.view())?;
    let n = out.nrows() as f64;
    Ok(fv.iter().zip(&nv).map(|(a, b)| -a + b / lambda).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{sample_feature_map, KernelSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use std::sync::Arc;

    fn small_arch() -> SamplerArch {
        SamplerArch {
            noise_dim: 3,
            hidden_width: 6,
            depth: 3,
            cond_dim: 0,
        }
    }

    #[test]
    fn identity_sampler_returns_noise() {
        let mut s = TransportSampler::affine(Array2::eye(2), Array1::zeros(2), 5).unwrap();
        let mut twin = s.clone();
        let noise = twin.draw_noise(10);
        assert_eq!(s.sample(10).unwrap(), noise);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut a = TransportSampler::new(&small_arch(), 2, 1, 2).unwrap();
        let mut b = TransportSampler::new(&small_arch(), 2, 1, 2).unwrap();
        assert_eq!(a.sample(7).unwrap(), b.sample(7).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn affine_pushforward_moments() {
        let mut s = TransportSampler::affine(array![[2.0]], array![3.0], 9).unwrap();
        let x = s.sample(100_000).unwrap();
        let n = x.nrows() as f64;
        let m = x.sum() / n;
        let sd = (x.mapv(|v| (v - m).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!((m - 3.0).abs() <= 3.0 * 2.0 / n.sqrt(), "mean {m}");
        assert!((sd - 2.0).abs() <= 0.02, "sd {sd}");
    }

    #[test]
    fn layer_shapes_are_validated() {
        let bad = vec![
            Layer {
                weights: Array2::zeros((4, 2)),
                bias: Array1::zeros(4),
                activation: Activation::Tanh,
            },
            Layer {
                weights: Array2::zeros((1, 3)),
                bias: Array1::zeros(1),
                activation: Activation::Linear,
            },
        ];
        assert!(TransportSampler::from_layers(bad, 0, 0).is_err());
        let s = TransportSampler::new(&small_arch(), 2, 0, 0).unwrap();
        assert_eq!(s.output_dim(), 2);
        assert_eq!(s.layers()[0].weights.ncols(), 3);
        assert_eq!(s.layers()[2].activation, Activation::Linear);
    }

    #[test]
    fn zero_functions_give_zero_gradient() {
        let mut s = TransportSampler::new(&small_arch(), 2, 3, 4).unwrap();
        let k = KernelSpec::new(1.0, 2).unwrap();
        let z = RkhsFunction::zero(k);
        let g = dual_gradient(&mut s, &z, &z, 1.0, 16).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn linear_witness_through_affine_map() {
        // f(x) ≈ c·x near the origin: a broad kernel bump far away is locally
        // linear; use its exact local slope as c.
        let k = KernelSpec::new(1.0e4, 1).unwrap();
        let f = RkhsFunction::from_expansion(k, array![[-300.0]].view(), vec![50.0]).unwrap();
        let mut s = TransportSampler::affine(array![[0.01]], array![0.0], 2).unwrap();
        let z = RkhsFunction::zero(k);
        let noise = s.draw_noise(2000);
        let g = dual_gradient_at(&s, &f, &z, 1.0, noise.view()).unwrap();
        let outputs = s.forward(noise.view()).unwrap();
        let c: f64 = outputs.iter().map(|&x| f.grad_x(&[x]).unwrap()[0]).sum::<f64>() / 2000.0;
        assert_abs_diff_eq!(g.layers[0].bias[0], -c, epsilon = 1e-12);
        let c0 = f.grad_x(&[0.0]).unwrap()[0];
        assert!((c - c0).abs() / c0.abs() < 1e-3);
    }

    fn random_functions(seed: u64, d: usize) -> (RkhsFunction, RkhsFunction) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = KernelSpec::new(rng.random_range(0.5..2.0), d).unwrap();
        let pts = Array2::from_shape_fn((12, d), |_| rng.random_range(-1.5..1.5));
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = RkhsFunction::from_expansion(k, pts.view(), c).unwrap();
        let map = Arc::new(sample_feature_map(&k, 64, seed).unwrap());
        let beta: Vec<f64> = (0..64).map(|_| rng.random_range(-0.3..0.3)).collect();
        let nu = RkhsFunction::from_beta(k, map, beta).unwrap();
        (f, nu)
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut s = TransportSampler::new(&small_arch(), 2, 10 + seed, 20 + seed).unwrap();
            let (f, nu) = random_functions(seed, 2);
            let lambda = 0.7;
            let noise = s.draw_noise(8);
            let g = dual_gradient_at(&s, &f, &nu, lambda, noise.view()).unwrap();
            let h = 1e-4;
            for li in 0..s.layers().len() {
                let (rows, cols) = s.layers()[li].weights.dim();
                for r in 0..rows {
                    for c in 0..cols {
                        let mut sp = s.clone();
                        sp.layers_mut()[li].weights[[r, c]] += h;
                        let mut sm = s.clone();
                        sm.layers_mut()[li].weights[[r, c]] -= h;
                        let fd = (dual_objective_at(&sp, &f, &nu, lambda, noise.view()).unwrap()
                            - dual_objective_at(&sm, &f, &nu, lambda, noise.view()).unwrap())
                            / (2.0 * h);
                        let an = g.layers[li].weights[[r, c]];
                        let err = (fd - an).abs() / an.abs().max(1e-3);
                        assert!(err <= 1e-4, "layer {li} ({r},{c}): fd {fd} vs {an}");
                    }
                    let mut sp = s.clone();
                    sp.layers_mut()[li].bias[r] += h;
                    let mut sm = s.clone();
                    sm.layers_mut()[li].bias[r] -= h;
                    let fd = (dual_objective_at(&sp, &f, &nu, lambda, noise.view()).unwrap()
                        - dual_objective_at(&sm, &f, &nu, lambda, noise.view()).unwrap())
                        / (2.0 * h);
                    let an = g.layers[li].bias[r];
                    assert!((fd - an).abs() / an.abs().max(1e-3) <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn clipping_caps_the_applied_norm() {
        let mut s = TransportSampler::new(&small_arch(), 2, 0, 0).unwrap();
        let before = s.clone();
        let mut g = ParamGradient::zeros_like(&s);
        assert_eq!(s.apply_update(&g, 0.1, 5.0).unwrap(), 0.0);
        assert_eq!(s, before);
        g.layers[0].weights[[0, 0]] = 6.0;
        g.layers[2].bias[1] = 8.0;
        assert_abs_diff_eq!(g.norm(), 10.0, epsilon = 1e-12);
        let applied = s.apply_update(&g, 1.0, 5.0).unwrap();
        assert_abs_diff_eq!(applied, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            s.layers()[0].weights[[0, 0]],
            before.layers()[0].weights[[0, 0]] - 3.0,
            epsilon = 1e-12
        );
        let mut t = before.clone();
        t.apply_update(&g, 0.0, 5.0).unwrap();
        assert_eq!(t.layers(), before.layers());
    }

    #[test]
    fn sequential_updates_add_when_unclipped() {
        let base = TransportSampler::new(&small_arch(), 2, 1, 1).unwrap();
        let (f, nu) = random_functions(4, 2);
        let mut tmp = base.clone();
        let g1 = dual_gradient(&mut tmp, &f, &nu, 1.0, 8).unwrap();
        let g2 = dual_gradient(&mut tmp, &f, &nu, 1.0, 8).unwrap();
        let mut seq = base.clone();
        seq.apply_update(&g1, 0.01, 1e6).unwrap();
        seq.apply_update(&g2, 0.01, 1e6).unwrap();
        let mut sum = g1.clone();
        sum.add(&g2).unwrap();
        let mut once = base.clone();
        once.apply_update(&sum, 0.01, 1e6).unwrap();
        for (a, b) in seq.layers().iter().zip(once.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_variance_scales_inversely_with_batch() {
        let s0 = TransportSampler::new(&small_arch(), 2, 2, 3).unwrap();
        let (f, nu) = random_functions(5, 2);
        let sizes = [4usize, 8, 16, 32, 64];
        let mut logs = Vec::new();
        for (i, &b) in sizes.iter().enumerate() {
            let mut s = s0.clone();
            s.reseed_noise(100 + i as u64);
            let draws: Vec<Vec<f64>> = (0..200)
                .map(|_| dual_gradient(&mut s, &f, &nu, 1.0, b).unwrap().to_vec())
                .collect();
            let p = draws[0].len();
            let mut total = 0.0;
            for j in 0..p {
                let m = draws.iter().map(|d| d[j]).sum::<f64>() / 200.0;
                total += draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / 199.0;
            }
            logs.push(((b as f64).ln(), total.ln()));
        }
        let n = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn serde_round_trip_preserves_forward_and_stream() {
        let mut s = TransportSampler::new(&small_arch(), 2, 7, 8).unwrap();
        s.sample(13).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let mut t: TransportSampler = serde_json::from_str(&json).unwrap();
        assert_eq!(s, t);
        let xs = s.sample(5).unwrap();
        let xt = t.sample(5).unwrap();
        assert_eq!(xs, xt);
    }

    #[test]
    fn conditional_inputs_are_concatenated() {
        let arch = SamplerArch {
            cond_dim: 1,
            ..small_arch()
        };
        let mut s = TransportSampler::new(&arch, 1, 0, 0).unwrap();
        let cond = array![[0.5], [-1.0]];
        let y = s.sample_conditional(cond.view()).unwrap();
        assert_eq!(y.dim(), (2, 1));
        assert!(s.sample(3).is_err());
    }
}
