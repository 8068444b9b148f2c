use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde_json::json;

use kexp_core::baselines::{fit_score_matching, hmc_sample, HmcConfig, ScoreMatchingModel};
use kexp_core::data::{gen_grid, gen_linear_gaussian, gen_ring, gen_two_moons, read_csv, Dataset, Normalization};
use kexp_core::eval::{mmd_median, nll_conditional, nll_unconditional, PartitionMethod};
use kexp_core::kernel::{median_bandwidth, KernelSpec};
use kexp_core::rng::derive_seed;
use kexp_core::trainer::{make_reference, train as train_dde, train_conditional, Mode, TrainConfig, TrainedModel};
use kexp_core::Error;

use crate::error::CliError;
use crate::io::{fmt_f64, write_matrix};
use crate::manifest::Run;
use crate::{EvalArgs, ExportArgs, GenArgs, Generator, Metric, ReportArgs, SampleArgs, SampleMethod, SplitArgs, TrainArgs, TrainMethod};

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn data_gen(a: &GenArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let ds = run.timings.time("generate", || match a.name {
        Generator::Ring => gen_ring(a.n, a.d, a.noise_sd, a.seed),
        Generator::Grid => gen_grid(a.n, a.d, a.seed),
        Generator::TwoMoons => gen_two_moons(a.n, a.seed),
        Generator::LinearGaussian => gen_linear_gaussian(a.n, a.seed),
    })?;
    let out = run.output("data.csv");
    ds.write_csv(&out)?;
    let d = match a.name {
        Generator::Ring | Generator::Grid => Some(a.d),
        _ => None,
    };
    let noise = (a.name == Generator::Ring).then_some(a.noise_sd);
    run.finish(
        json!({"command": "data gen", "name": a.name, "n": a.n, "d": d, "noise_sd": noise, "seed": a.seed}),
        Some(a.seed),
    )
}

pub fn data_export(a: &ExportArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let ds = read_csv(&a.data)?;
    let out = run.output("data.csv");
    if a.normalize {
        let norm = Normalization::fit(ds.samples.view())?;
        ds.normalized_with(&norm)?.write_csv(&out)?;
        let np = run.output("normalization.json");
        std::fs::write(np, serde_json::to_string_pretty(&norm)? + "\n")?;
    } else {
        ds.write_csv(&out)?;
    }
    run.finish(
        json!({"command": "data export", "data": path_str(&a.data), "normalize": a.normalize}),
        None,
    )
}

pub fn data_split(a: &SplitArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let ds = read_csv(&a.data)?;
    let (train, test) = ds.split(a.seed);
    train.write_csv(&run.output("train.csv"))?;
    test.write_csv(&run.output("test.csv"))?;
    run.finish(
        json!({"command": "data split", "data": path_str(&a.data), "seed": a.seed}),
        Some(a.seed),
    )
}

fn read_partitioned(path: &Path, x_cols: &Option<Vec<usize>>, y_cols: &Option<Vec<usize>>) -> Result<Dataset, CliError> {
    let ds = read_csv(path)?;
    match (x_cols, y_cols) {
        (Some(x), Some(y)) => Ok(ds.with_partition(x.clone(), y.clone())?),
        (None, None) => Ok(ds),
        _ => Err(CliError::usage("--x-cols and --y-cols must be given together")),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let data = read_partitioned(&a.data, &a.x_cols, &a.y_cols)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let semantic = json!({
        "command": "train",
        "method": a.method,
        "data": path_str(&a.data),
        "x_cols": a.x_cols,
        "y_cols": a.y_cols,
        "config": cfg,
        "sm_eta": (a.method == TrainMethod::ScoreMatching).then_some(a.sm_eta),
        "sm_lambda": (a.method == TrainMethod::ScoreMatching).then_some(a.sm_lambda),
    });
    match a.method {
        TrainMethod::Dde => {
            let model = run.timings.time("train", || {
                if data.is_conditional() {
                    train_conditional(&data, &cfg)
                } else {
                    train_dde(&data, &cfg)
                }
            })?;
            model.save(&run.output("model.json"))?;
            let mut w = csv::Writer::from_path(run.output("curve.csv"))?;
            w.write_record(["iteration", "objective", "mmd_to_train"])?;
            for c in &model.stats.curve {
                w.write_record([c.iteration.to_string(), fmt_f64(c.objective), fmt_f64(c.mmd_to_train)])?;
            }
            w.flush()?;
        }
        TrainMethod::ScoreMatching => {
            if data.is_conditional() {
                return Err(Error::Unsupported("score matching fits unconditional models only".into()).into());
            }
            let model = run.timings.time("train", || -> kexp_core::Result<ScoreMatchingModel> {
                let bw = match cfg.bandwidth_sq {
                    Some(b) => b,
                    None => median_bandwidth(data.samples.view())?,
                };
                let kernel = KernelSpec::new(bw, data.dim())?;
                let base = make_reference(data.samples.view(), cfg.reference_inflation)?;
                fit_score_matching(&data, &kernel, a.sm_eta, a.sm_lambda, &base)
            })?;
            model.save(&run.output("model.json"))?;
        }
    }
    run.finish(semantic, Some(cfg.seed))
}

pub enum LoadedModel {
    Dde(TrainedModel),
    ScoreMatching(ScoreMatchingModel),
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    match TrainedModel::load(path) {
        Ok(m) => Ok(LoadedModel::Dde(m)),
        Err(Error::Json(_)) => ScoreMatchingModel::load(path)
            .map(LoadedModel::ScoreMatching)
            .map_err(|e| CliError::usage(format!("{} is not a model file: {e}", path.display()))),
        Err(e) => Err(e.into()),
    }
}

fn plain_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

pub fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let model = run.timings.time("setup", || load_model(&a.model))?;
    let hmc_cfg = match &a.hmc_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => HmcConfig::default(),
    };
    let semantic = json!({
        "command": "sample",
        "model": path_str(&a.model),
        "method": a.method,
        "n": a.n,
        "seed": a.seed,
        "cond": a.cond.as_deref().map(path_str),
        "hmc": (a.method == SampleMethod::Hmc).then_some(&hmc_cfg),
    });
    let out = run.output("samples.csv");
    match (a.method, model) {
        (SampleMethod::Direct, LoadedModel::ScoreMatching(_)) => {
            return Err(CliError::usage("score-matching models have no direct sampler; use --method hmc"));
        }
        (SampleMethod::Direct, LoadedModel::Dde(mut m)) => {
            m.sampler.reseed_noise(derive_seed(a.seed, "sample"));
            match m.mode.clone() {
                Mode::Unconditional => {
                    if a.cond.is_some() {
                        return Err(CliError::usage("--cond applies to conditional models only"));
                    }
                    let d = m.output_dim();
                    let s = if a.n == 0 {
                        Array2::zeros((0, d))
                    } else {
                        run.timings.time("sample", || m.sample(a.n))?
                    };
                    write_matrix(&out, &plain_header(d), s.view())?;
                }
                Mode::Conditional { x_cols, .. } => {
                    let Some(cp) = &a.cond else {
                        return Err(CliError::usage("conditional models need --cond with conditioning inputs"));
                    };
                    let cds = read_csv(cp)?;
                    if x_cols.iter().any(|&c| c >= cds.dim()) {
                        return Err(CliError::usage("--cond file lacks the model's conditioning columns"));
                    }
                    let x = cds.samples.select(Axis(1), &x_cols);
                    let y = run.timings.time("sample", || m.sample_conditional(x.view()))?;
                    let mut header: Vec<String> = x_cols.iter().map(|&c| cds.columns[c].clone()).collect();
                    header.extend((0..y.ncols()).map(|j| format!("y{j}")));
                    let joined = concatenate(Axis(1), &[x.view(), y.view()]).map_err(|e| CliError::other(e.to_string()))?;
                    write_matrix(&out, &header, joined.view())?;
                }
            }
        }
        (SampleMethod::Hmc, model) => {
            if a.cond.is_some() {
                return Err(CliError::usage("hmc sampling supports unconditional models only"));
            }
            let cfg = HmcConfig {
                seed: derive_seed(a.seed, "hmc"),
                chain_length: hmc_cfg.burn_in + a.n,
                ..hmc_cfg
            };
            let (d, draws) = match model {
                LoadedModel::Dde(m) => {
                    if m.is_conditional() {
                        return Err(CliError::usage("hmc sampling supports unconditional models only"));
                    }
                    let d = m.output_dim();
                    let init = m.base.mean.clone();
                    let out = if a.n == 0 {
                        None
                    } else {
                        Some(run.timings.time("sample", || {
                            hmc_sample(
                                |y| Ok((m.log_unnormalized(None, y)?, m.grad_log_unnormalized(None, y)?)),
                                &cfg,
                                &init,
                            )
                        })?)
                    };
                    (d, out)
                }
                LoadedModel::ScoreMatching(m) => {
                    let d = m.dim();
                    let init = m.base.mean.clone();
                    let out = if a.n == 0 {
                        None
                    } else {
                        Some(run.timings.time("sample", || hmc_sample(|x| m.log_density_grad(x), &cfg, &init))?)
                    };
                    (d, out)
                }
            };
            let draws = draws.map(|o| o.draws).unwrap_or_else(|| Array2::zeros((0, d)));
            write_matrix(&out, &plain_header(d), draws.view())?;
        }
    }
    if let Some(t) = run.timings.get("sample") {
        println!("sampled {} points in {t:.4} s", a.n);
    }
    run.finish(semantic, Some(a.seed))
}

struct MetricRow {
    dataset: String,
    method: String,
    metric: String,
    value: f64,
    stderr: Option<f64>,
    seed: u64,
}

const METRIC_HEADER: [&str; 6] = ["dataset", "method", "metric", "value", "stderr", "seed"];

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let test = read_csv(&a.test)?;
    let method = match a.quadrature {
        Some(g) => PartitionMethod::Quadrature { grid_points: g },
        None => PartitionMethod::Importance { n_mc: a.n_mc },
    };
    let semantic = json!({
        "command": "eval",
        "metric": a.metric,
        "samples": a.samples.as_deref().map(path_str),
        "model": a.model.as_deref().map(path_str),
        "test": path_str(&a.test),
        "partition": (a.metric == Metric::Nll).then_some(method),
        "dataset": a.dataset,
        "label": a.label,
        "seed": a.seed,
        "append": a.append,
    });
    let row = |metric: &str, value: f64, stderr: Option<f64>| MetricRow {
        dataset: a.dataset.clone(),
        method: a.label.clone(),
        metric: metric.to_owned(),
        value,
        stderr,
        seed: a.seed,
    };
    let rows = match a.metric {
        Metric::Mmd => {
            let Some(sp) = &a.samples else {
                return Err(CliError::usage("--metric mmd needs --samples"));
            };
            let samples = read_csv(sp)?;
            let r = run
                .timings
                .time("mmd", || mmd_median(samples.samples.view(), test.samples.view(), derive_seed(a.seed, "mmd")))?;
            vec![row("mmd_unbiased", r.mmd_unbiased, None), row("mmd_biased", r.mmd_biased, None)]
        }
        Metric::Nll => {
            let Some(mp) = &a.model else {
                return Err(CliError::usage("--metric nll needs --model"));
            };
            let LoadedModel::Dde(m) = load_model(mp)? else {
                return Err(CliError::usage("nll needs a model trained with --method dde"));
            };
            let seed = derive_seed(a.seed, "nll");
            let r = run.timings.time("nll", || {
                if m.is_conditional() {
                    nll_conditional(&m, &test, method, seed)
                } else {
                    nll_unconditional(&m, &test, method, seed)
                }
            })?;
            vec![row("nll", r.mean_nll, Some(r.std_err))]
        }
    };
    let path = run.output("metrics.csv");
    let fresh = !a.append || !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRIC_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.dataset,
            r.method,
            r.metric,
            fmt_f64(r.value),
            r.stderr.map(fmt_f64).unwrap_or_default(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    run.finish(semantic, Some(a.seed))
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRIC_HEADER {
        return Err(CliError::usage(format!("{} is not a metrics file", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::usage(format!("{}: row {}: bad {what}", path.display(), i + 1));
        rows.push(MetricRow {
            dataset: rec[0].to_owned(),
            method: rec[1].to_owned(),
            metric: rec[2].to_owned(),
            value: rec[3].parse().map_err(|_| bad("value"))?,
            stderr: if rec[4].is_empty() { None } else { Some(rec[4].parse().map_err(|_| bad("stderr"))?) },
            seed: rec[5].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(rows)
}

/// Sample mean and sample standard deviation; the deviation of a single
/// value is reported as 0.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_panel(run: &mut Run, spec: &str) -> Result<(), CliError> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("panel {spec:?} is not name=path[:xcol,ycol]")))?;
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(CliError::usage(format!("panel name {name:?} must be alphanumeric")));
    }
    let (path, cols) = match rest.rsplit_once(':') {
        Some((p, c)) if c.contains(',') => (p, Some(c)),
        _ => (rest, None),
    };
    let ds = read_csv(Path::new(path))?;
    let (xi, yi) = match cols {
        Some(c) => {
            let (x, y) = c.split_once(',').expect("checked");
            let find = |n: &str| {
                ds.columns
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| CliError::usage(format!("{path} has no column {n:?}")))
            };
            (find(x)?, find(y)?)
        }
        None if ds.dim() >= 2 => (0, 1),
        None => return Err(CliError::usage(format!("{path} needs two columns for a panel"))),
    };
    let xy = ds.samples.select(Axis(1), &[xi, yi]);
    let header = [ds.columns[xi].clone(), ds.columns[yi].clone()];
    write_matrix(&run.output(&format!("panel_{name}.csv")), &header, xy.view())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut run = Run::start(&a.out)?;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for p in &a.metrics {
        for r in read_metrics(p)? {
            groups.entry((r.metric, r.dataset, r.method)).or_default().push(r.value);
        }
    }
    if groups.is_empty() {
        return Err(CliError::usage("no metric rows to report"));
    }
    let mut w = csv::Writer::from_path(run.output("summary.csv"))?;
    w.write_record(["dataset", "method", "metric", "mean", "std", "n"])?;
    let mut stats = BTreeMap::new();
    for ((metric, dataset, method), v) in &groups {
        let (m, s) = mean_std(v);
        w.write_record([dataset.clone(), method.clone(), metric.clone(), fmt_f64(m), fmt_f64(s), v.len().to_string()])?;
        stats.insert((metric.clone(), dataset.clone(), method.clone()), (m, s));
    }
    w.flush()?;

    let mut md = String::new();
    let metrics: Vec<&String> = {
        let mut m: Vec<&String> = groups.keys().map(|k| &k.0).collect();
        m.dedup();
        m
    };
    for metric in metrics {
        let datasets: Vec<&String> = {
            let mut d: Vec<&String> = groups.keys().filter(|k| &k.0 == metric).map(|k| &k.1).collect();
            d.sort();
            d.dedup();
            d
        };
        let methods: Vec<&String> = {
            let mut d: Vec<&String> = groups.keys().filter(|k| &k.0 == metric).map(|k| &k.2).collect();
            d.sort();
            d.dedup();
            d
        };
        md.push_str(&format!("### {metric}\n\n| dataset |"));
        for m in &methods {
            md.push_str(&format!(" {m} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(methods.len()));
        md.push('\n');
        for d in &datasets {
            md.push_str(&format!("| {d} |"));
            for m in &methods {
                match stats.get(&(metric.clone(), (*d).clone(), (*m).clone())) {
                    Some((mean, sd)) => md.push_str(&format!(" {mean:.4e} ± {sd:.2e} |")),
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
        md.push('\n');
    }
    std::fs::write(run.output("table.md"), md)?;
    for p in &a.panel {
        write_panel(&mut run, p)?;
    }
    run.finish(
        json!({
            "command": "report",
            "metrics": a.metrics.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
            "panel": a.panel,
        }),
        None,
    )
}
