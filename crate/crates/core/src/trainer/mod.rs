//! The outer saddle-point loop: inner `(f, ν)` refreshes alternate with
//! dual-gradient updates of the transport sampler.

mod config;
mod model;
mod reference;

pub use config::TrainConfig;
pub use model::{CurvePoint, Mode, TrainStats, TrainedModel};
pub use reference::{make_reference, ReferenceMeasure};

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::eval::mmd_median;
use crate::error::{Error, Result};
use crate::kernel::{median_bandwidth, sample_feature_map, KernelSpec};
use crate::rkhs::{inner_objective, Backend, InnerLoopState, PointSource, RkhsFunction};
use crate::rng::{derive_seed, substream};
use crate::sampler::{backprop_witness, dual_gradient, TransportSampler};

use model::scaled;

/// Data rows and conditioning layout, in kernel-space terms.
struct Problem {
    mode: Mode,
    /// Unconditional: the data. Conditional: the `x` columns.
    x: Array2<f64>,
    /// Kernel-space data points.
    z: Array2<f64>,
}

impl Problem {
    fn to_kernel(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
        match &self.mode {
            Mode::Unconditional => y.to_owned(),
            Mode::Conditional { x_scale, y_scale, .. } => {
                let dz = x.ncols() + y.ncols();
                let mut z = Array2::zeros((y.nrows(), dz));
                for (i, mut row) in z.rows_mut().into_iter().enumerate() {
                    let v = scaled(
                        x.row(i).as_slice().expect("standard layout"),
                        y.row(i).as_slice().expect("standard layout"),
                        *x_scale,
                        *y_scale,
                    );
                    row.assign(&ndarray::Array1::from(v));
                }
                z
            }
        }
    }
}

struct Source<'a> {
    problem: &'a Problem,
    sampler: &'a mut TransportSampler,
    base: &'a ReferenceMeasure,
    batch_rng: &'a mut ChaCha8Rng,
    base_rng: &'a mut ChaCha8Rng,
}

impl Source<'_> {
    fn indices(&mut self, n: usize) -> Vec<usize> {
        let m = self.problem.z.nrows();
        (0..n).map(|_| self.batch_rng.random_range(0..m)).collect()
    }

    fn cond_batch(&mut self, n: usize) -> Array2<f64> {
        let idx = self.indices(n);
        self.problem.x.select(Axis(0), &idx)
    }
}

impl PointSource for Source<'_> {
    fn data_batch(&mut self, n: usize) -> Array2<f64> {
        let idx = self.indices(n);
        self.problem.z.select(Axis(0), &idx)
    }

    fn model_batch(&mut self, n: usize) -> Result<Array2<f64>> {
        match self.problem.mode {
            Mode::Unconditional => self.sampler.sample(n),
            Mode::Conditional { .. } => {
                let x = self.cond_batch(n);
                let y = self.sampler.sample_conditional(x.view())?;
                Ok(self.problem.to_kernel(x.view(), y.view()))
            }
        }
    }

    fn base_batch(&mut self, n: usize) -> Array2<f64> {
        match self.problem.mode {
            Mode::Unconditional => self.base.sample(n, self.base_rng),
            Mode::Conditional { .. } => {
                let x = self.cond_batch(n);
                let y = self.base.sample(n, self.base_rng);
                self.problem.to_kernel(x.view(), y.view())
            }
        }
    }
}

fn zero_pair(kernel: KernelSpec, cfg: &TrainConfig) -> Result<(RkhsFunction, RkhsFunction)> {
    match cfg.backend {
        Backend::Expansion => Ok((RkhsFunction::zero(kernel), RkhsFunction::zero(kernel))),
        Backend::RandomFeature => {
            let map = Arc::new(sample_feature_map(&kernel, cfg.r, derive_seed(cfg.seed, "features"))?);
            Ok((
                RkhsFunction::zero_random_feature(kernel, map.clone())?,
                RkhsFunction::zero_random_feature(kernel, map)?,
            ))
        }
    }
}

/// Trains an unconditional model on all columns of `data`.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.n() < 2 {
        return Err(Error::DegenerateData("training needs at least 2 samples".into()));
    }
    let samples = data.samples.clone();
    let base = make_reference(samples.view(), cfg.reference_inflation)?;
    let bw = match cfg.bandwidth_sq {
        Some(b) => b,
        None => median_bandwidth(samples.view())?,
    };
    let kernel = KernelSpec::new(bw, data.dim())?;
    let problem = Problem {
        mode: Mode::Unconditional,
        x: samples.clone(),
        z: samples,
    };
    run(problem, kernel, base, data, cfg)
}

/// Trains a model of `y | x` using the dataset's column partition.
pub fn train_conditional(data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let (Some(x), Some(y)) = (data.x(), data.y()) else {
        return Err(Error::InvalidConfig(
            "conditional training needs x and y columns".into(),
        ));
    };
    if data.n() < 2 {
        return Err(Error::DegenerateData("training needs at least 2 samples".into()));
    }
    let base = make_reference(y.view(), cfg.reference_inflation)?;
    let (x_bw, y_bw) = match cfg.bandwidth_sq {
        Some(b) => (b, b),
        None => (median_bandwidth(x.view())?, median_bandwidth(y.view())?),
    };
    let mode = Mode::Conditional {
        x_cols: data.x_cols.clone().expect("checked"),
        y_cols: data.y_cols.clone().expect("checked"),
        x_scale: x_bw.sqrt(),
        y_scale: y_bw.sqrt(),
    };
    let mut problem = Problem {
        mode,
        z: Array2::zeros((0, 0)),
        x,
    };
    problem.z = problem.to_kernel(problem.x.view(), y.view());
    let kernel = KernelSpec::new(1.0, data.dim())?;
    run(problem, kernel, base, data, cfg)
}

fn run(
    problem: Problem,
    kernel: KernelSpec,
    base: ReferenceMeasure,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let cond_dim = problem.x.ncols() * usize::from(problem.mode != Mode::Unconditional);
    let mut arch = cfg.sampler.clone();
    arch.cond_dim = cond_dim;
    let mut sampler = TransportSampler::new(
        &arch,
        base.dim(),
        derive_seed(cfg.seed, "sampler_init"),
        derive_seed(cfg.seed, "noise"),
    )?;
    // Start the pushforward at the reference mean.
    let last = sampler.layers_mut().last_mut().expect("non-empty");
    last.bias.assign(&ndarray::Array1::from(base.mean.clone()));

    let (f0, nu0) = zero_pair(kernel, cfg)?;
    let mut state = InnerLoopState::new(f0.clone(), nu0.clone(), cfg.schedule())?;
    let mut batch_rng = substream(cfg.seed, "minibatch");
    let mut base_rng = substream(cfg.seed, "reference");
    let inner = cfg.inner();
    let mut stats = TrainStats::default();
    let lambda = cfg.lambda;

    for l in 0..cfg.outer_iters {
        if cfg.cold_start {
            state = InnerLoopState::new(f0.clone(), nu0.clone(), cfg.schedule())?;
        } else if cfg.restart_schedule {
            state.reset_steps();
        }
        {
            let mut src = Source {
                problem: &problem,
                sampler: &mut sampler,
                base: &base,
                batch_rng: &mut batch_rng,
                base_rng: &mut base_rng,
            };
            state.run(&mut src, &inner)?;
        }
        stats.inner_refreshes += 1;
        track_peaks(&mut stats, &state);
        for _ in 0..cfg.sampler_updates_per_f {
            for _ in 0..cfg.nu_updates_per_sampler {
                let mut src = Source {
                    problem: &problem,
                    sampler: &mut sampler,
                    base: &base,
                    batch_rng: &mut batch_rng,
                    base_rng: &mut base_rng,
                };
                let model = src.model_batch(cfg.batch)?;
                let basept = src.base_batch(cfg.batch);
                state.update_nu(model.view(), basept.view(), lambda)?;
                state.enforce_budget(inner.max_terms)?;
                stats.extra_nu_steps += 1;
            }
            track_peaks(&mut stats, &state);
            let grad = match &problem.mode {
                Mode::Unconditional => dual_gradient(&mut sampler, &state.f, &state.nu, lambda, cfg.batch)?,
                Mode::Conditional { x_scale, y_scale, .. } => {
                    let idx: Vec<usize> = (0..cfg.batch)
                        .map(|_| batch_rng.random_range(0..problem.x.nrows()))
                        .collect();
                    let x = problem.x.select(Axis(0), &idx);
                    let noise = sampler.draw_noise(cfg.batch);
                    let inputs = sampler.inputs(Some(x.view()), noise.view())?;
                    let (f, nu) = (&state.f, &state.nu);
                    let dx = x.ncols();
                    backprop_witness(&sampler, inputs.view(), |i, y, out| {
                        let z = scaled(x.row(i).as_slice().expect("standard layout"), y, *x_scale, *y_scale);
                        let gf = f.grad_x(&z)?;
                        let gn = nu.grad_x(&z)?;
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = (-gf[dx + j] + gn[dx + j] / lambda) / y_scale;
                        }
                        Ok(())
                    })?
                }
            };
            sampler.apply_update(&grad, cfg.rho(l), cfg.clip_norm)?;
            stats.sampler_updates += 1;
        }
        if cfg.log_every > 0 && (l + 1) % cfg.log_every == 0 {
            let (objective, model) = estimate(
                &problem,
                &state.f,
                &state.nu,
                &sampler,
                &base,
                cfg,
                cfg.log_samples.max(2),
                derive_seed(cfg.seed, "curve"),
            )?;
            let mmd = mmd_median(model.view(), problem.z.view(), derive_seed(cfg.seed, "curve_mmd"))?;
            stats.curve.push(CurvePoint {
                iteration: l + 1,
                objective,
                mmd_to_train: mmd.mmd_unbiased,
            });
        }
    }
    stats.dropped_mass = state.dropped_mass();
    let (f, nu) = state.into_functions();
    Ok(TrainedModel {
        mode: problem.mode,
        f,
        nu,
        sampler,
        base,
        config: cfg.clone(),
        normalization: data.normalization.clone(),
        stats,
    })
}

fn track_peaks(stats: &mut TrainStats, state: &InnerLoopState) {
    stats.peak_f_terms = stats.peak_f_terms.max(state.f.num_terms());
    stats.peak_nu_terms = stats.peak_nu_terms.max(state.nu.num_terms());
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    problem: &Problem,
    f: &RkhsFunction,
    nu: &RkhsFunction,
    sampler: &TransportSampler,
    base: &ReferenceMeasure,
    cfg: &TrainConfig,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, Array2<f64>)> {
    let mut sampler = sampler.clone();
    sampler.reseed_noise(derive_seed(seed, "noise"));
    let mut batch_rng = substream(seed, "minibatch");
    let mut base_rng = substream(seed, "reference");
    let mut src = Source {
        problem,
        sampler: &mut sampler,
        base,
        batch_rng: &mut batch_rng,
        base_rng: &mut base_rng,
    };
    let model = src.model_batch(n_mc)?;
    let basept = src.base_batch(n_mc);
    let value = inner_objective(f, nu, problem.z.view(), model.view(), basept.view(), cfg.eta, cfg.lambda)?;
    Ok((value, model))
}

/// Monte-Carlo estimate of the saddle objective
/// `Ê_D[f] - E_q[f] - (η/2)‖f‖² + (1/λ)(E_q[ν] - E_{p₀}[exp ν] + 1)` for a
/// trained model, using `n_mc` sampler and reference draws.
pub fn objective_estimate(model: &TrainedModel, data: &Dataset, n_mc: usize, seed: u64) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be >= 1".into()));
    }
    let problem = match &model.mode {
        Mode::Unconditional => Problem {
            mode: Mode::Unconditional,
            x: data.samples.clone(),
            z: data.samples.clone(),
        },
        Mode::Conditional { x_cols, y_cols, .. } => {
            let x = data.samples.select(Axis(1), x_cols);
            let y = data.samples.select(Axis(1), y_cols);
            let mut p = Problem {
                mode: model.mode.clone(),
                x,
                z: Array2::zeros((0, 0)),
            };
            p.z = p.to_kernel(p.x.view(), y.view());
            p
        }
    };
    Ok(estimate(&problem, &model.f, &model.nu, &model.sampler, &model.base, &model.config, n_mc, seed)?.0)
}
